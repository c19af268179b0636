from enum import Enum

# Project
TITLE = "Meta-LoRA Desk"
SETTINGS_FILE = "data/settings.json"
DEFAULT_WORKDIR = "runs/default"

# Artifact container
ARTIFACT_MAGIC = b"LRCY"
ARTIFACT_VERSION = 1

# Numerics
KL_EPSILON = 1e-12          # probability clamp inside logs
LAYERNORM_EPSILON = 1e-5
STD_FLOOR = 1e-3            # statistics regularizer std clamp
STD_EPSILON = 1e-12         # inside sqrt of the batch variance
PROB_SUM_TOLERANCE = 1e-6

# LoRA
LORA_INIT_STD = 0.02
LORA_SITES = ("q", "v")     # attention projections that carry adapters
DEFAULT_RANK = 4

# Schedules (one cycle = warmup + cosine)
WARMUP_ITERS = 25
CYCLE_ITERS = 100
WARMUP_START_LR = 1e-5
PEAK_LR = 1e-3

# Inversion
INVERSION_ITERS = 2000
INVERSION_LR = 0.25
ALPHA_R = 0.01
MIN_PROBE_IMAGES = 64

# Episodes
DEFAULT_QUERY_PER_CLASS = 15
DEFAULT_EPISODES = 600
QUICK_EPISODES = 100
CI_Z = 1.96

# Backward pass costs about twice the forward pass
TRAIN_FLOPS_FACTOR = 3


class SparseSelection(Enum):
    MASK = "mask"
    FIRST_LAYER_ATTENTION = "first_layer_attention"


class PretrainTarget(Enum):
    COLOR = "color"    # coarse per-image labels
    CLASS = "class"


class TaskSource(Enum):
    GENERATED = "generated"
    REAL = "real"


class EvalMethod(Enum):
    META_LORA = "meta_lora"
    NN_BASELINE = "nn_baseline"
    LORAS_AVG_NN = "loras_avg_nn"
    RANDOM_LORA = "random_lora"
    JOINT_LORA = "joint_lora"


# Default settings, one section per pipeline stage
DEFAULT_SETTINGS = {
    "runtime": {
        "seed": 0,
        "precision": "float32",
        "log_level": "INFO",
        "progress": True,
        "workers": 1,
        "workdir": DEFAULT_WORKDIR,
    },
    "dataset": {
        "image_size": 24,
        "channels": 3,
        "train_classes": 12,
        "test_classes": 6,
        "images_per_class": 40,
        "probe_images": 64,
        "cross_domain": False,
    },
    "backbone": {
        "patch_size": 4,
        "depth": 2,
        "embed_dim": 64,
        "num_heads": 4,
        "mlp_ratio": 4,
        "pretrain_steps": 300,
        "pretrain_lr": 1e-3,
        "batch_size": 64,
        "pretrain_target": PretrainTarget.COLOR.value,
    },
    "teachers": {
        "count": 20,
        "ways": 2,
        "ranks": [DEFAULT_RANK],
        "lr": PEAK_LR,
        "max_steps": 300,
        "target_accuracy": 0.95,
        "batch_size": 32,
    },
    "inversion": {
        "iterations": 200,
        "lr": INVERSION_LR,
        "alpha_r": ALPHA_R,
        "images_per_class": 16,
        "plan": "",
        "track_regions": False,
        "checkpoint_every": 50,
    },
    "meta": {
        "iterations": 300,
        "p_interp": 0.3,
        "n_way": 2,
        "k_shot": 1,
        "q_query": DEFAULT_QUERY_PER_CLASS,
        "rank": DEFAULT_RANK,
        "sparse": False,
        "token_selection": SparseSelection.MASK.value,
        "trainable_layers": "all",
        "entire_backbone": False,
        "distance": "euclidean",
        "task_source": TaskSource.GENERATED.value,
        "flip": True,
        "lr_mode": "cyclic",
    },
    "eval": {
        "episodes": QUICK_EPISODES,
        "n_way": 2,
        "k_shot": 1,
        "q_query": DEFAULT_QUERY_PER_CLASS,
        "methods": ["meta_lora", "nn_baseline", "loras_avg_nn", "random_lora"],
        "sparse_ratio": 0.0,
    },
    "flops": {
        "plans": ["", "0:0.75", "5:0.75", "11:0.75"],
        "sparse_ratios": [0.25, 0.5, 0.75],
        "reference": "vit-b",
        "measure": False,
    },
}
