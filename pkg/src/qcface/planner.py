"""Desk-scale hypersphere planning: synthetic identities and a two-phase SGD trainer.

Samples come from class prototypes perturbed by tangential Gaussian noise,
so the noise level controls how recognizable a sample is. Embeddings are
either produced by a linear encoder (inputs -> R^d) or are free magnitudes
along frozen directions. Training runs an ArcFace-only warm-up followed by
the full objective with the magnitude regularizer switched on.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFiniteGradient, PrototypeSeparationFailure
from .geometry import FeatureBatch
from .gradients import batch_gradients
from .margins import MarginSpec, arcface, forward, guidance_values
from .regularizer import RegParams, reg_loss

log = logging.getLogger(__name__)

MIN_PROTOTYPE_ANGLE = math.radians(30.0)
PROTOTYPE_RETRIES = 10_000


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    C: int = 8
    d: int = 16
    n_per_class: int = 50
    noise_levels: tuple = ((0.0, 0.4), (0.2, 0.4), (0.5, 0.2))
    mislabel_rate: float = 0.02
    input_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        levels = tuple((float(s), float(f)) for s, f in self.noise_levels)
        object.__setattr__(self, "noise_levels", levels)
        if self.C < 2 or self.d < 2 or self.n_per_class < 1:
            raise ValueError("need C >= 2, d >= 2 and n_per_class >= 1")
        if self.input_dim < self.d:
            raise ValueError("input_dim must be >= d")
        if not levels:
            raise ValueError("at least one noise level is required")
        if any(s < 0 or not 0 <= f <= 1 for s, f in levels):
            raise ValueError("noise sigmas must be >= 0 and fractions in [0, 1]")
        if abs(sum(f for _, f in levels) - 1.0) > 1e-12:
            raise ValueError("noise level fractions must sum to 1")
        if not 0.0 <= self.mislabel_rate < 1.0:
            raise ValueError("mislabel_rate must lie in [0, 1)")


@dataclass
class SyntheticData:
    inputs: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    noise_sigma: np.ndarray
    mislabeled: np.ndarray
    prototypes: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def batch(self, features=None) -> FeatureBatch:
        """FeatureBatch skeleton; features default to the input directions."""
        f = self.inputs if features is None else features
        return FeatureBatch(f, self.labels, self.noise_sigma, self.mislabeled)


def _level_counts(n: int, fractions) -> list[int]:
    # largest-remainder allocation so every class has the same composition
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _draw_prototypes(rng, C: int, dim: int) -> np.ndarray:
    cos_max = math.cos(MIN_PROTOTYPE_ANGLE)
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < C:
        tries += 1
        if tries > PROTOTYPE_RETRIES:
            raise PrototypeSeparationFailure(
                f"could not place {C} prototypes 30 degrees apart in {dim} dimensions"
            )
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(np.dot(v, p) <= cos_max for p in protos):
            protos.append(v)
    return np.stack(protos)


def generate_synthetic(spec: SyntheticSpec, dim: int | None = None) -> SyntheticData:
    """Deterministic dataset of unit input directions grouped by class.

    A sample with noise ``sigma`` is its prototype plus isotropic
    ``N(0, sigma^2 I)`` noise projected onto the tangent space, renormalized. Mislabeled samples keep
    their direction and receive a uniformly drawn wrong label.
    """
    dim = spec.input_dim if dim is None else dim
    root = np.random.SeedSequence(spec.seed)
    proto_ss, noise_ss, label_ss = root.spawn(3)
    protos = _draw_prototypes(np.random.default_rng(proto_ss), spec.C, dim)
    rng = np.random.default_rng(noise_ss)

    counts = _level_counts(spec.n_per_class, [f for _, f in spec.noise_levels])
    sigmas_per_class = np.repeat([s for s, _ in spec.noise_levels], counts)

    inputs, labels, sigmas = [], [], []
    for c in range(spec.C):
        p = protos[c]
        for sigma in sigmas_per_class:
            if sigma == 0.0:
                x = p.copy()
            else:
                g = rng.standard_normal(dim)
                g -= np.dot(g, p) * p
                x = p + sigma * g
                x /= np.linalg.norm(x)
            inputs.append(x)
            labels.append(c)
            sigmas.append(sigma)
    inputs = np.stack(inputs)
    true_labels = np.asarray(labels, dtype=np.int64)
    labels = true_labels.copy()

    n = len(labels)
    n_bad = int(round(spec.mislabel_rate * n))
    lrng = np.random.default_rng(label_ss)
    bad = np.sort(lrng.choice(n, size=n_bad, replace=False)) if n_bad else np.array([], dtype=np.int64)
    for i in bad:
        shift = int(lrng.integers(1, spec.C))
        labels[i] = (true_labels[i] + shift) % spec.C
    mislabeled = np.zeros(n, dtype=bool)
    mislabeled[bad] = True
    return SyntheticData(inputs, labels, true_labels, np.asarray(sigmas), mislabeled, protos)


# -- training -----------------------------------------------------------------


class Mode(str, enum.Enum):
    FROZEN_DIRECTION = "frozen_direction"
    LINEAR_ENCODER = "linear_encoder"


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.LINEAR_ENCODER
    warmup_epochs: int = 10
    main_epochs: int = 30
    lr: float = 1.0
    lr_milestones: tuple = ()
    lr_decay: float = 0.1
    batch_size: int = 50
    spec: MarginSpec = field(default_factory=arcface)
    reg: RegParams = field(default_factory=RegParams)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.warmup_epochs < 0 or self.main_epochs < 1:
            raise ValueError("need warmup_epochs >= 0 and main_epochs >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr milestones must be strictly increasing")
        if ms and (ms[0] < 1 or ms[-1] >= self.total_epochs):
            raise ValueError("lr milestones must lie in [1, total epochs)")

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.main_epochs

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; decays after each milestone epoch."""
        n = sum(1 for m in self.lr_milestones if m < epoch)
        return self.lr * self.lr_decay**n

    def phase_at(self, epoch: int) -> str:
        return "warmup" if epoch <= self.warmup_epochs else "main"


@dataclass
class HistoryRow:
    epoch: int
    phase: str
    mean_lsm: float
    mean_lreg: float
    mean_pd: float
    lr: float


@dataclass
class PlanState:
    proxies: np.ndarray
    mode: Mode
    directions: np.ndarray | None = None
    magnitudes: np.ndarray | None = None
    encoder: np.ndarray | None = None
    bias: np.ndarray | None = None
    epoch: int = 0
    history: list = field(default_factory=list)

    def embed(self, data: SyntheticData) -> np.ndarray:
        if self.mode is Mode.FROZEN_DIRECTION:
            return self.directions * self.magnitudes[:, None]
        return data.inputs @ self.encoder.T + self.bias

    def copy(self) -> PlanState:
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return PlanState(
            self.proxies.copy(), self.mode, cp(self.directions), cp(self.magnitudes),
            cp(self.encoder), cp(self.bias), self.epoch, list(self.history),
        )

    def as_dict(self) -> dict:
        out = {"mode": self.mode.value, "epoch": self.epoch, "proxies": self.proxies.tolist()}
        for name in ("directions", "magnitudes", "encoder", "bias"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val.tolist()
        return out


def init_state(cfg: TrainConfig, data: SyntheticData, d: int) -> PlanState:
    """Random unit proxies; embeddings start at magnitude (l_a + u_a)/2."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    W = rng.standard_normal((data.prototypes.shape[0], d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    mid = 0.5 * (cfg.reg.l_a + cfg.reg.u_a)
    if cfg.mode is Mode.FROZEN_DIRECTION:
        if data.inputs.shape[1] != d:
            raise ValueError("frozen-direction mode needs data generated in d dimensions")
        return PlanState(W, cfg.mode, directions=data.inputs.copy(), magnitudes=np.full(len(data), mid))
    D = data.inputs.shape[1]
    A = rng.standard_normal((d, D))
    A *= mid / np.mean(np.linalg.norm(data.inputs @ A.T, axis=1))
    return PlanState(W, cfg.mode, encoder=A, bias=np.zeros(d))


def _phase_objective(cfg: TrainConfig, epoch: int) -> tuple[MarginSpec, float]:
    if cfg.phase_at(epoch) == "warmup":
        return cfg.spec.arcface_form(), 0.0
    return cfg.spec, cfg.reg.lambda_g


def evaluate(state: PlanState, data: SyntheticData, spec: MarginSpec, reg: RegParams):
    """Per-sample (L_sm, L_reg, p_d) over the whole dataset."""
    Z = state.embed(data)
    fw = forward(spec, Z, data.labels, state.proxies)
    p_d = guidance_values(Z, data.labels, state.proxies, spec.s)
    lreg = np.atleast_1d(reg_loss(reg, fw.z_norm, p_d))
    return fw.loss, lreg, p_d


def train_step(state: PlanState, cfg: TrainConfig, data: SyntheticData, idx, epoch: int | None = None) -> PlanState:
    """One SGD step on the samples ``idx``; returns a new state.

    In the warm-up phase the regularizer weight is zero and the softmax term
    is plain ArcFace. In frozen-direction mode only the radial part of each
    feature gradient is applied.
    """
    epoch = state.epoch + 1 if epoch is None else epoch
    spec, lam = _phase_objective(cfg, epoch)
    lr = cfg.lr_at(epoch)
    idx = np.asarray(idx)
    B = len(idx)
    Z = state.embed(data)[idx] if cfg.mode is Mode.LINEAR_ENCODER else (
        state.directions[idx] * state.magnitudes[idx, None]
    )
    g = batch_gradients(spec, Z, data.labels[idx], state.proxies, reg=cfg.reg, lambda_g=lam)
    dZ = g.dZ / B
    dW = g.dW / B
    if not (np.all(np.isfinite(dZ)) and np.all(np.isfinite(dW))):
        raise NonFiniteGradient(f"non-finite gradient at epoch {epoch}", state)

    new = state.copy()
    new.proxies = state.proxies - lr * dW
    if cfg.mode is Mode.FROZEN_DIRECTION:
        radial = np.einsum("nd,nd->n", dZ, state.directions[idx])
        mags = new.magnitudes.copy()
        mags[idx] = state.magnitudes[idx] - lr * radial
        new.magnitudes = mags
        if np.any(~(mags > 0.0)) or not np.all(np.isfinite(mags)):
            raise NonFiniteGradient(f"magnitude left (0, inf) at epoch {epoch}", state)
    else:
        X = data.inputs[idx]
        new.encoder = state.encoder - lr * (dZ.T @ X)
        new.bias = state.bias - lr * dZ.sum(axis=0)
        if not np.all(np.isfinite(new.encoder)):
            raise NonFiniteGradient(f"encoder diverged at epoch {epoch}", state)
    if np.any(np.linalg.norm(new.proxies, axis=1) == 0.0) or not np.all(np.isfinite(new.proxies)):
        raise NonFiniteGradient(f"proxy collapsed at epoch {epoch}", state)
    return new


@dataclass
class PlanResult:
    state: PlanState
    history: list
    main_start: HistoryRow


def _history_row(state, data, cfg, epoch, phase, lr) -> HistoryRow:
    spec = cfg.spec.arcface_form() if phase == "warmup" else cfg.spec
    lsm, lreg, p_d = evaluate(state, data, spec, cfg.reg)
    return HistoryRow(epoch, phase, float(np.mean(lsm)), float(np.mean(lreg)), float(np.mean(p_d)), lr)


def run_schedule(cfg: TrainConfig, data: SyntheticData, state: PlanState | None = None) -> PlanResult:
    """Warm-up epochs with ArcFace alone, then main epochs with the full objective.

    Each epoch visits the samples in a fresh seeded permutation; one history
    row is recorded per epoch from a full-dataset evaluation.
    """
    if state is None:
        raise ValueError("pass an initialized state (see init_state)")
    order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    n = len(data)
    history: list[HistoryRow] = []
    main_start = None
    if cfg.warmup_epochs == 0:
        main_start = _history_row(state, data, cfg, 0, "main", cfg.lr_at(1))
    for epoch in range(1, cfg.total_epochs + 1):
        perm = order_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            state = train_step(state, cfg, data, perm[lo : lo + cfg.batch_size], epoch)
        state.epoch = epoch
        phase = cfg.phase_at(epoch)
        row = _history_row(state, data, cfg, epoch, phase, cfg.lr_at(epoch))
        history.append(row)
        if epoch == cfg.warmup_epochs:
            main_start = _history_row(state, data, cfg, epoch, "main", cfg.lr_at(epoch + 1))
        log.debug("epoch %d %s lsm=%.4f lreg=%.4f pd=%.4f", epoch, phase, row.mean_lsm, row.mean_lreg, row.mean_pd)
    state.history = history
    return PlanResult(state, history, main_start)


def plan(data_spec: SyntheticSpec, cfg: TrainConfig) -> tuple[SyntheticData, PlanResult]:
    """Generate the data, initialize and run the full schedule."""
    dim = data_spec.d if cfg.mode is Mode.FROZEN_DIRECTION else data_spec.input_dim
    data = generate_synthetic(data_spec, dim)
    state = init_state(cfg, data, data_spec.d)
    return data, run_schedule(cfg, data, state)


@dataclass
class PlanSummary:
    """Final-epoch quantities used by the acceptance checks and the sweep."""

    p_d: np.ndarray
    magnitude: np.ndarray
    cos_to_proxy: np.ndarray
    lsm: np.ndarray
    lreg: np.ndarray


def summarize(result: PlanResult, data: SyntheticData, cfg: TrainConfig) -> PlanSummary:
    state = result.state
    Z = state.embed(data)
    lsm, lreg, p_d = evaluate(state, data, cfg.spec, cfg.reg)
    mags = np.linalg.norm(Z, axis=1)
    W = state.proxies
    own = W[data.labels]
    cos = np.einsum("nd,nd->n", Z, own) / (mags * np.linalg.norm(own, axis=1))
    return PlanSummary(p_d, mags, cos, lsm, lreg)


def with_warmup(cfg: TrainConfig, warmup_epochs: int) -> TrainConfig:
    return replace(cfg, warmup_epochs=warmup_epochs)
