"""Denoising diffusion over power-flow records with constraint guidance.

Timesteps run ``t = 1..T`` with ``alpha_bar_0 = 1``.  The ``4B`` state is split
into two halves, ``(p, theta)`` and ``(q, v)``, each with its own denoiser; the
halves share one noise schedule and one set of normalisation statistics.
Sampling and guidance happen in the normalised ``[-1, 1]`` space, while the
constraint residuals are evaluated on denormalised (per-unit) values.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import acpf
from .datagen import Dataset, NormStats, denorm_jacobian_diag, denormalize, fit_norm, normalize
from .grid import GridCase, parse_case
from .neural import MLP, Adam

log = logging.getLogger(__name__)

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "forward_diffuse",
    "tweedie_estimate",
    "posterior_step",
    "split_indices",
    "split_halves",
    "join_halves",
    "DecoupledModel",
    "TrainConfig",
    "TrainingError",
    "train_decoupled",
    "GuidanceConfig",
    "SamplingAborted",
    "guidance_gradient",
    "sample_unguided",
    "sample_guided",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step coefficients; array entry ``k`` belongs to timestep ``t = k + 1``."""

    T: int
    beta_1: float
    beta_T: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    sigma: np.ndarray
    coef_xt: np.ndarray
    coef_x0: np.ndarray


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule and the derived posterior coefficients."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta_1 <= beta_T < 1:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    beta = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    one_minus = 1.0 - alpha_bar
    sigma = np.sqrt(beta * (1.0 - alpha_bar_prev) / one_minus)
    coef_xt = np.sqrt(alpha) * (1.0 - alpha_bar_prev) / one_minus
    coef_x0 = np.sqrt(alpha_bar_prev) * beta / one_minus
    # alpha_bar_0 = 1 makes the t = 1 step return the clean estimate; pin it exactly
    coef_xt[0], coef_x0[0], sigma[0] = 0.0, 1.0, 0.0
    arrays = (beta, alpha, alpha_bar, alpha_bar_prev, sigma, coef_xt, coef_x0)
    for a in arrays:
        a.setflags(write=False)
    return NoiseSchedule(int(T), float(beta_1), float(beta_T), *arrays)


def _at(arr: np.ndarray, t) -> np.ndarray:
    """Coefficient(s) at timestep ``t``, shaped to broadcast against ``(N, D)`` batches."""
    t = np.asarray(t)
    vals = arr[t - 1]
    return vals[..., None] if t.ndim else vals


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    ab = _at(schedule.alpha_bar, t)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def tweedie_estimate(x_t, t, denoiser, schedule: NoiseSchedule) -> np.ndarray:
    """Clean-sample estimate from a noisy sample and the predicted noise."""
    ab = _at(schedule.alpha_bar, t)
    eps_hat = denoiser(x_t, t)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_step(x_t, x0_hat, t, z, schedule: NoiseSchedule) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``; the noise is dropped at ``t = 1``."""
    cx = _at(schedule.coef_xt, t)
    c0 = _at(schedule.coef_x0, t)
    out = cx * np.asarray(x_t) + c0 * np.asarray(x0_hat)
    if np.all(np.asarray(t) == 1):
        return out
    return out + _at(schedule.sigma, t) * np.asarray(z)


def split_indices(n_bus: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions of ``(p, theta)`` and ``(q, v)`` inside the flat ``(p, q, v, theta)`` layout."""
    b = np.arange(n_bus)
    first = np.concatenate([b, 3 * n_bus + b])
    second = np.concatenate([n_bus + b, 2 * n_bus + b])
    return first, second


def split_halves(x: np.ndarray):
    first, second = split_indices(x.shape[-1] // 4)
    return x[..., first], x[..., second]


def join_halves(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    n_bus = x1.shape[-1] // 2
    first, second = split_indices(n_bus)
    out = np.empty(x1.shape[:-1] + (4 * n_bus,))
    out[..., first] = x1
    out[..., second] = x2
    return out


@dataclass
class DecoupledModel:
    net1: MLP
    net2: MLP
    schedule: NoiseSchedule
    stats: NormStats
    case_name: str = ""
    case_text: str = ""

    @property
    def n_bus(self) -> int:
        return self.net1.data_dim // 2

    def case(self) -> GridCase:
        if not self.case_text:
            raise ValueError("checkpoint carries no case description")
        return parse_case(self.case_text)

    def tweedie(self, x_t, t) -> np.ndarray:
        x1, x2 = split_halves(x_t)
        return join_halves(tweedie_estimate(x1, t, self.net1, self.schedule),
                           tweedie_estimate(x2, t, self.net2, self.schedule))


@dataclass
class TrainConfig:
    steps: int = 30_000
    batch_size: int = 128
    lr: float = 1e-3
    hidden: tuple[int, ...] | None = None
    embed_dim: int = 32
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 2e-2

    def hidden_for(self, n_bus: int) -> tuple[int, ...]:
        if self.hidden:
            return tuple(self.hidden)
        width = max(128, 4 * n_bus)
        return (width, width)


class TrainingError(RuntimeError):
    pass


def train_decoupled(dataset: Dataset | np.ndarray, config: TrainConfig | None = None, seed: int = 0,
                    stats: NormStats | None = None, case_text: str = "", case_name: str = "",
                    log_every: int = 0):
    """Fit both denoisers on min-max normalised data.

    Rows are put into lexicographic order first, so the result depends on the
    dataset contents and ``seed`` only, not on file row order.  Returns the model
    and the per-step loss trace (sum of the two halves' losses).
    """
    config = config or TrainConfig()
    data = dataset.data if isinstance(dataset, Dataset) else np.atleast_2d(np.asarray(dataset, dtype=float))
    if not case_name and isinstance(dataset, Dataset):
        case_name = dataset.case_name
    data = data[np.lexsort(data.T[::-1])]
    stats = stats or fit_norm(data)
    x1, x2 = split_halves(normalize(data, stats))
    n, width = x1.shape

    schedule = make_schedule(config.T, config.beta_1, config.beta_T)
    hidden = config.hidden_for(width // 2)
    net1 = MLP(width, hidden, embed_dim=config.embed_dim, T=config.T,
               rng=np.random.default_rng(np.random.SeedSequence([seed, 1])))
    net2 = MLP(width, hidden, embed_dim=config.embed_dim, T=config.T,
               rng=np.random.default_rng(np.random.SeedSequence([seed, 2])))
    opt1, opt2 = Adam(lr=config.lr), Adam(lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    sqrt_ab = np.sqrt(schedule.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bar)

    trace = np.empty(config.steps)
    perm = rng.permutation(n)
    pos = 0
    bs = min(config.batch_size, n)
    for step in range(config.steps):
        if pos + bs > n:
            perm = rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + bs]
        pos += bs
        t = rng.integers(1, config.T + 1, size=bs)
        eps1 = rng.standard_normal((bs, width))
        eps2 = rng.standard_normal((bs, width))
        a, s = sqrt_ab[t - 1, None], sqrt_1mab[t - 1, None]
        loss1, g1 = net1.param_gradients(a * x1[idx] + s * eps1, t, eps1)
        loss2, g2 = net2.param_gradients(a * x2[idx] + s * eps2, t, eps2)
        loss = loss1 + loss2
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} (halves: {loss1}, {loss2})")
        opt1.step(net1, g1)
        opt2.step(net2, g2)
        trace[step] = loss
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.5f", step + 1, trace[max(0, step + 1 - log_every):step + 1].mean())
    model = DecoupledModel(net1, net2, schedule, stats, case_name, case_text)
    return model, trace


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance strength and how the gradient is pulled back to ``x_t``.

    ``mode="exact-vjp"`` differentiates through the denoiser; ``"approximate"``
    treats the predicted noise as constant.
    """

    lam: float = 0.0
    mode: str = "exact-vjp"
    include_inequalities: bool = True
    lam_schedule: tuple[float, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("guidance scale must be non-negative")
        if self.mode not in ("exact-vjp", "approximate"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")

    def scale_at(self, t: int) -> float:
        if self.lam_schedule is not None:
            return float(self.lam_schedule[t - 1])
        return self.lam


class SamplingAborted(RuntimeError):
    def __init__(self, step: int, chains):
        self.step = step
        self.chains = list(chains)
        super().__init__(f"non-finite sampling trajectory at step t={step} "
                         f"(chains {self.chains[:5]}{'...' if len(self.chains) > 5 else ''}); "
                         f"guidance scale likely too large")


def guidance_gradient(x_t, x0_hat, t, model: DecoupledModel, case: GridCase,
                      config: GuidanceConfig) -> np.ndarray:
    """Gradient w.r.t. ``x_t`` of the constraint residuals at the denormalised ``x0_hat``."""
    x_t = np.atleast_2d(x_t)
    x0_hat = np.atleast_2d(x0_hat)
    phys = denormalize(x0_hat, model.stats)
    g = acpf.grad_residual_H(phys, case)
    if config.include_inequalities:
        g = g + acpf.grad_residual_G(phys, case)
    cot = g * denorm_jacobian_diag(model.stats)
    ab = model.schedule.alpha_bar[t - 1]
    if config.mode == "approximate":
        return cot / np.sqrt(ab)
    c1, c2 = split_halves(cot)
    xt1, xt2 = split_halves(x_t)
    s = np.sqrt(1.0 - ab)
    g1 = c1 - s * model.net1.input_vjp(xt1, t, c1)
    g2 = c2 - s * model.net2.input_vjp(xt2, t, c2)
    return join_halves(g1, g2) / np.sqrt(ab)


def _chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, chain]))


def _run_chunk(model: DecoupledModel, chains: range, seed: int, chunk_size: int,
               case: GridCase | None, guidance: GuidanceConfig | None, clip: bool) -> np.ndarray:
    """Reverse process for a block of chains, zero-padded to ``chunk_size`` rows."""
    dim = 4 * model.n_bus
    n_real = len(chains)
    rngs = [_chain_rng(seed, c) for c in chains]
    pad = np.zeros((chunk_size - n_real, dim))

    def noise():
        return np.vstack([np.stack([r.standard_normal(dim) for r in rngs]), pad])

    x = noise()
    with np.errstate(over="ignore", invalid="ignore"):
        return _reverse_loop(model, x, chains, n_real, noise, case, guidance, clip)


def _reverse_loop(model, x, chains, n_real, noise, case, guidance, clip):
    # overflow is expected on runaway chains and reported through SamplingAborted
    for t in range(model.schedule.T, 0, -1):
        x0 = model.tweedie(x, t)
        if clip:
            x0 = np.clip(x0, -1.0, 1.0)
        lam = guidance.scale_at(t) if guidance is not None else 0.0
        if lam != 0.0:
            x0 = x0 - lam * guidance_gradient(x, x0, t, model, case, guidance)
            if clip:
                x0 = np.clip(x0, -1.0, 1.0)
        z = noise() if t > 1 else None
        x = posterior_step(x, x0, t, z, model.schedule)
        bad = ~np.all(np.isfinite(x[:n_real]), axis=1)
        if bad.any():
            raise SamplingAborted(t, [chains[i] for i in np.flatnonzero(bad)])
    return x[:n_real]


def _sample(model: DecoupledModel, n: int, seed: int, case: GridCase | None,
            guidance: GuidanceConfig | None, chunk_size: int, threads: int, clip: bool) -> Dataset:
    blocks = [range(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        parts = list(pool.map(lambda blk: _run_chunk(model, blk, seed, chunk_size, case, guidance, clip),
                              blocks))
    x = np.vstack(parts) if parts else np.empty((0, 4 * model.n_bus))
    return Dataset(denormalize(x, model.stats), model.case_name, seed)


def sample_unguided(model: DecoupledModel, n: int, seed: int, chunk_size: int = 256,
                    threads: int = 1, clip: bool = True) -> Dataset:
    """Ancestral sampling without guidance, denormalised to per-unit values.

    Chain ``i`` draws all of its noise from the stream ``(seed, i)`` and chains are
    batched in fixed-size zero-padded blocks, so the output is independent of
    ``threads``.  With ``clip`` the clean estimate is clamped to the normalised
    data box ``[-1, 1]`` at every step (before and after any guidance correction).
    """
    return _sample(model, n, seed, None, None, chunk_size, threads, clip)


def sample_guided(model: DecoupledModel, case: GridCase, n: int, seed: int, config: GuidanceConfig,
                  chunk_size: int = 256, threads: int = 1, clip: bool = True) -> Dataset:
    """Ancestral sampling with the clean estimate corrected by the constraint gradient."""
    if case.n_bus != model.n_bus:
        raise ValueError("case size does not match the model")
    return _sample(model, n, seed, case, config, chunk_size, threads, clip)


_MAGIC = b"GRIDFLOW-CKPT\n"
_VERSION = 1


def checkpoint_bytes(model: DecoupledModel, extra: dict | None = None) -> bytes:
    """Serialise to a deterministic byte string: magic, JSON header, raw float64 payload."""
    arrays = [*model.net1.params, *model.net2.params, model.stats.x_min, model.stats.x_max]
    header = {
        "version": _VERSION,
        "schedule": {"T": model.schedule.T, "beta_1": model.schedule.beta_1, "beta_T": model.schedule.beta_T},
        "net1": model.net1.config(),
        "net2": model.net2.config(),
        "shapes": [list(a.shape) for a in arrays],
        "case_name": model.case_name,
        "case_text": model.case_text,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return _MAGIC + struct.pack("<Q", len(head)) + head + payload


def save_checkpoint(model: DecoupledModel, path, extra: dict | None = None) -> str:
    """Write the checkpoint; returns its sha256 hex digest."""
    blob = checkpoint_bytes(model, extra)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[DecoupledModel, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a gridflow checkpoint")
    off = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", blob[off:off + 8])
    off += 8
    header = json.loads(blob[off:off + hlen].decode("utf-8"))
    if header.get("version") != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    off += hlen
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(float))
        off += 8 * count
    if off != len(blob):
        raise ValueError(f"{path}: trailing or missing payload bytes")

    def net(cfg, params):
        return MLP(cfg["data_dim"], cfg["hidden"], cfg["out_dim"], cfg["embed_dim"], cfg["T"], params=params)

    n1 = len(MLP(header["net1"]["data_dim"], header["net1"]["hidden"], header["net1"]["out_dim"],
                 header["net1"]["embed_dim"], header["net1"]["T"], rng=0).params)
    net1 = net(header["net1"], arrays[:n1])
    net2 = net(header["net2"], arrays[n1:2 * n1])
    stats = NormStats(arrays[-2], arrays[-1])
    sch = header["schedule"]
    model = DecoupledModel(net1, net2, make_schedule(sch["T"], sch["beta_1"], sch["beta_T"]), stats,
                           header["case_name"], header["case_text"])
    return model, header["extra"]


def train_config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden) if config.hidden else None
    return d
