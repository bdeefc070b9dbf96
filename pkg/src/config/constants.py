"""
Configuration Constants and Defaults

Every default value and expected type of the run configuration, grouped by
section. settings.py builds its validated schema from these tables.
"""

from typing import Any, Dict, Tuple, Type

# (size, batch, iterations)
PAPER_PHASE_LIST = [[256, 8, 100_000], [336, 4, 200_000], [416, 2, 20_000]]
DESK_PHASE_LIST = [[32, 4, 300], [48, 2, 300], [64, 1, 150]]

# learning-rate peak and cosine period for each phase list; the desk period
# matches its phase lengths so every phase ends annealed
PAPER_SCHEDULE = {"lr_max": 2e-4, "t_max": 1000}
DESK_SCHEDULE = {"lr_max": 1e-3, "t_max": 150}

# metal pixel count bounds on the 416 x 416 reference grid
SIZE_GROUP_REFERENCE_BINS = {"tiny": (0, 80), "small": (81, 180), "medium": (181, 650), "large": (651, None)}


# =============================================================================
# CONFIGURATION DEFAULTS AND TYPES
# =============================================================================

class ConfigDefaults:
    """(default, type) per key, one table per configuration section."""

    NET = {
        "base_channels": (12, int),
        "stage_blocks": ([1, 2, 2, 4, 2, 2, 1, 1], list),
        "branches": ("nhv", str),
        "pools": ("am", str),
        "weight_activation": ("sigmoid", str),
        "skip_fusion": ("concat", str),
        "upsampler": ("transposed", str),
        "head_zero_init": (True, bool),
        "norm_eps": (1e-5, float),
    }

    SSM = {
        "d_state": (8, int),
        "expand": (2, int),
        "conv_kernel": (3, int),
        "dt_min": (1e-3, float),
        "dt_max": (1e-1, float),
        "chunk": (16, int),
        "method": ("chunked", str),
    }

    LOSS = {
        "alpha": (0.8, float),
        "beta": (0.2, float),
        "c": (0.03, float),
        "mode": ("both", str),
        "normalize": (True, bool),
    }

    SCHEDULE = {
        "lr_max": (DESK_SCHEDULE["lr_max"], float),
        "lr_min": (1e-8, float),
        "t_max": (DESK_SCHEDULE["t_max"], int),
        "mode": ("restart", str),
    }

    PHASES = {
        "preset": ("desk", str),
        "list": ([list(p) for p in DESK_PHASE_LIST], list),
    }

    TRAIN = {
        "precision": ("float64", str),
        "checkpoint_every": (500, int),
        "keep_last": (3, int),
        "log_every": (50, int),
        "adam_beta1": (0.9, float),
        "adam_beta2": (0.999, float),
        "adam_eps": (1e-8, float),
    }

    SYNTH = {
        "count": (16, int),
        "size": (128, int),
        "n_angles": (180, int),
        "size_mix": (["large", "medium", "small", "tiny"], list),
        "metal_count": (1, int),
        "gamma": (0.3, float),
        "cap": (1.0, float),
        "noise_fraction": (0.02, float),
        "metal_attenuation": (4.0, float),
        "export_pgm": (False, bool),
        "hu_slope": (2000.0, float),
        "hu_intercept": (-1000.0, float),
    }

    EVAL = {
        "dilation": (0, int),
        "modes": (["non_metal", "metal_included"], list),
        "limit": (0, int),
    }

    INFER = {
        "tau": (1.2, float),
        "real_mode": (False, bool),
    }

    ANALYSIS = {
        "bins": (36, int),
        "annulus": ([0.15, 0.45], list),
        "block": ("enc2.0", str),
        "hu_lo": (-175.0, float),
        "hu_hi": (275.0, float),
        "gain": (2.0, float),
        "profile_sizes": ([64, 128], list),
        "profile_repeats": (3, int),
    }

    LOGGING = {
        "level": ("INFO", str),
        "console_output": (True, bool),
        "use_rich_console": (True, bool),
        "file_output": (True, bool),
        "max_log_size_mb": (50, int),
        "backup_count": (5, int),
    }

    RUNTIME = {
        "seed": (0, int),
        "threads": (1, int),
    }

    @classmethod
    def sections(cls) -> Dict[str, Dict[str, Tuple[Any, Type]]]:
        return {
            "net": cls.NET,
            "ssm": cls.SSM,
            "loss": cls.LOSS,
            "schedule": cls.SCHEDULE,
            "phases": cls.PHASES,
            "train": cls.TRAIN,
            "synth": cls.SYNTH,
            "eval": cls.EVAL,
            "infer": cls.INFER,
            "analysis": cls.ANALYSIS,
            "logging": cls.LOGGING,
            "runtime": cls.RUNTIME,
        }

    @classmethod
    def get_default_and_type(cls, section: str, key: str) -> Tuple[Any, Type]:
        table = cls.sections().get(section, {})
        if key not in table:
            raise KeyError(f"{section}.{key}")
        return table[key]

    @classmethod
    def get_default(cls, section: str, key: str) -> Any:
        default, _ = cls.get_default_and_type(section, key)
        return default
