from duplex.duallearn.losses import (
    LOSS_NAMES,
    AblationMode,
    LossBreakdown,
    PseudoLabelCache,
    PseudoLabeler,
    TaskWeights,
    TriBatch,
    active_losses,
    compose_losses,
    pseudo_label_audio,
    pseudo_label_text,
)
from duplex.duallearn.schedule import TrainConfig, TriBatchSampler, alternating_third
from duplex.duallearn.trainer import (
    DualTrainer,
    LMTrainConfig,
    TrainingDivergedError,
    compose_step,
    pretrain_then_dual,
    pseudo_label_accuracy,
    train_external_lm,
)
