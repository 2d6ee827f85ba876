"""Run configuration shared by the model, trainer and CLI.

A config is a flat bag of scalars so it can round-trip through a plain
``key = value`` text file. Shape-bearing fields (d, w, k, hop, horizon,
sharing flags) travel inside checkpoints so evaluation can rebuild the
exact parameter structure.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass
class TrainingConfig:
    # optimization
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    clip_norm: float = 0.0          # 0 disables gradient clipping
    grid_epochs: int = 5            # reduced budget for grid-search runs

    # architecture
    d: int = 64                     # hidden width
    w: int = 12                     # input window length
    k: int = 4                      # sampled neighbors per target
    hop: int = 1                    # neighbor candidate radius (hops)
    horizon: int = 1                # forecast steps, single multi-output head
    dropout: float = 0.1
    top_k: int = 0                  # coarse-graph row sparsity; 0 means min(k, 4)
    c_init: str = "zeros"           # "zeros" | "normal" (seeded, sigma 0.01)
    share_time: bool = False        # one gate set per encoder instead of per step
    share_encoders: bool = False    # neighbors share one encoder

    # objective
    huber_beta: float = 1.0
    literal_eq9: bool = False       # branch-threshold 0.5 variant of the loss
    literal_eq5: bool = False       # plain e/sum(e) attention normalization
    sg_mode: str = "message"        # "message" | "recurrence" | "off"
    ablate_spatial: bool = False    # zero the static spatial weights
    ablate_ctg: bool = False        # skip the coarse temporal-graph refinement

    # data / evaluation
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2
    mape_floor: float = 1.0
    exclude_imputed: bool = False

    def effective_top_k(self) -> int:
        t = self.top_k if self.top_k > 0 else min(self.k, 4)
        return min(t, self.k)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.d <= 0 or self.w < 2 or self.horizon <= 0:
            raise ValueError("d must be positive, w >= 2, horizon >= 1")
        if self.k < 0 or self.hop < 1:
            raise ValueError("k must be >= 0 and hop >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.huber_beta <= 0:
            raise ValueError("huber_beta must be positive")
        if self.sg_mode not in ("message", "recurrence", "off"):
            raise ValueError(f"unknown sg_mode {self.sg_mode!r}")
        if self.c_init not in ("zeros", "normal"):
            raise ValueError(f"unknown c_init {self.c_init!r}")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0 (0 selects the default)")
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must be non-negative and sum to 1")
        if self.mape_floor < 0:
            raise ValueError("mape_floor must be >= 0")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables)")

    # fields whose values are baked into a checkpoint's parameter shapes
    SHAPE_FIELDS = ("d", "w", "k", "hop", "horizon", "top_k", "c_init",
                    "share_time", "share_encoders", "sg_mode",
                    "literal_eq5", "ablate_spatial", "ablate_ctg")


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainingConfig)]
