"""Speaker-verification back-ends over precomputed speaker embeddings.

Three scorers over (enrollment set, test embedding) trials: a trainable
attention back-end that aggregates multiple enrollment embeddings into one
representative vector, plus cosine and Gaussian-PLDA baselines, with an
EER / minDCF / DET evaluation stack and binary file formats for
embeddings, models, and checkpoints.
"""

from .attention import (
    AttentionParams,
    BackendConfig,
    backend_backward,
    backend_forward,
    ffsa_forward,
    init_params,
    load_params,
    save_params,
    score,
    sdsa_forward,
)
from .baselines import (
    LdaProjection,
    PldaModel,
    aggregate_enrollment,
    cosine_score,
    lda_apply,
    lda_fit,
    load_lda,
    load_plda,
    plda_fit,
    plda_score,
    plda_score_multi,
    save_lda,
    save_plda,
)
from .data import (
    EmbeddingSet,
    SyntheticSpec,
    Trial,
    TrialList,
    generate_synthetic,
    read_embeddings,
    read_trials,
    split_train_eval,
    write_embeddings,
    write_trials,
)
from .estimators import (
    AttentionBackend,
    CosineBackend,
    LinearDiscriminantProjection,
    PldaBackend,
)
from .metrics import (
    OperatingPoint,
    ScoreSet,
    det_points,
    eer,
    min_dcf,
    read_scores,
    write_det,
    write_scores,
)
from .numerics import grad_check, make_rng, matmul, softmax_rows, spawn_rng, tanh_elem
from .objectives import LossValue, bce_loss, combined_loss, ge2e_loss
from .trainer import (
    BatchSpec,
    CyclicalLrSchedule,
    TrainState,
    compose_batch,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
