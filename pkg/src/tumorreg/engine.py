"""Registration engine: recurrent forward pass, unsupervised training,
and a non-amortized per-pair optimizer sharing the same objective.

The forward pass runs T recurrent steps. Each step predicts a stationary
velocity field, integrates it (and its negation) to a diffeomorphic
deformation, chains the moving image/mask forward and the fixed
image/mask backward, and records everything the losses need. The final
deformation is the composition of the per-step fields.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError
from .deformation import DeformationField, exp_svf, compose_all
from .losses import LossWeights, StepRecord, total_loss
from .network import NetworkParams, RecurrentState, init_params, param_spec, predict_velocity

CHECKPOINT_MAGIC = b"TRCR"
CHECKPOINT_VERSION = 1

LOSS_COLUMNS = ("epoch", "sim", "sim_inv", "smooth", "smooth_inv", "pre", "ob", "total")


class EngineError(RuntimeError):
    """Raised on non-finite activations or diverging optimization."""


@dataclass
class EngineConfig:
    steps: int = 8                  # recurrent steps T
    int_steps: int = 7              # scaling-and-squaring iterations
    levels: int = 4
    channels: tuple = (8, 16, 16, 32)
    lr: float = 2e-4
    epochs: int = 100
    batch_size: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    leaky_alpha: float = 0.2
    full_res_flow: bool = False
    smooth_normalized: bool = True
    cond_forward: bool = True
    cond_inverse: bool = True
    sim_metric: str = "mse"
    opt_iters: int = 200            # per-pair optimizer iterations
    opt_lr: float = 0.1
    max_grad_norm: float | None = None   # global-norm gradient clip

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.int_steps < 1:
            raise ValueError(f"int_steps must be >= 1, got {self.int_steps}")
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ValueError("channels must list one width per level")
        if any(c <= 0 for c in self.channels):
            raise ValueError(f"channel widths must be positive: {self.channels}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def config_to_dict(cfg: EngineConfig) -> dict:
    d = asdict(cfg)
    d["channels"] = list(cfg.channels)
    return d


def config_from_dict(d: dict) -> EngineConfig:
    d = dict(d)
    if "weights" in d and isinstance(d["weights"], dict):
        d["weights"] = LossWeights(**d["weights"])
    return EngineConfig(**d)


@dataclass
class PairTensors:
    """A registration pair lifted into autodiff tensors ([D,H,W] each)."""

    I_m: Tensor
    y_m: Tensor
    I_f: Tensor
    y_f: Tensor

    @property
    def extents(self):
        return self.I_m.shape


def pair_tensors(pair, cond_forward: bool = True, cond_inverse: bool = True) -> PairTensors:
    """Wrap a RegistrationPair's arrays; disabled conditioning zeroes the
    corresponding tumor mask everywhere it is used."""
    arrays = [np.asarray(a, dtype=np.float32) for a in
              (pair.I_m, pair.y_m, pair.I_f, pair.y_f)]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"pair volumes must share extents, got {sorted(shapes)}")
    i_m, y_m, i_f, y_f = arrays
    if not cond_forward:
        y_m = np.zeros_like(y_m)
    if not cond_inverse:
        y_f = np.zeros_like(y_f)
    return PairTensors(Tensor(i_m), Tensor(y_m), Tensor(i_f), Tensor(y_f))


def _advance_step(cur, v: Tensor, cfg: EngineConfig):
    """Integrate one velocity field and chain-warp both directions.

    `cur` is (moving image, moving mask, fixed image, fixed mask), all
    [1,D,H,W] tensors holding the previous step's outputs.
    """
    phi = exp_svf(v, cfg.int_steps)
    phi_hat = exp_svf(ad.neg(v), cfg.int_steps)
    m_img, m_msk, f_img, f_msk = cur
    new_m_img = ad.grid_sample(m_img, phi.disp)
    new_m_msk = ad.grid_sample(m_msk, phi.disp)
    new_f_img = ad.grid_sample(f_img, phi_hat.disp)
    new_f_msk = ad.grid_sample(f_msk, phi_hat.disp)
    extents = v.shape[1:]
    record = StepRecord(
        phi_t=phi, phi_hat_t=phi_hat,
        warped_moving=new_m_img.reshape(extents),
        warped_moving_mask=new_m_msk.reshape(extents),
        warped_fixed=new_f_img.reshape(extents),
        warped_fixed_mask=new_f_msk.reshape(extents))
    return (new_m_img, new_m_msk, new_f_img, new_f_msk), record


def final_fields(records):
    """(phi_final, phi_hat_final) composed from the per-step records."""
    phi_final = compose_all([r.phi_t for r in records])
    phi_hat_final = compose_all([r.phi_hat_t for r in reversed(records)])
    return phi_final, phi_hat_final


def forward_register(pair, params: NetworkParams, cfg: EngineConfig):
    """Run the recurrent network on one pair.

    Returns (step records, phi_final, phi_hat_final). The network input
    at each step is the 4-channel stack {warped moving image, warped
    moving mask, fixed image, fixed mask}.
    """
    pt = pair if isinstance(pair, PairTensors) else \
        pair_tensors(pair, cfg.cond_forward, cfg.cond_inverse)
    extents = pt.extents
    as_chan = lambda t: t.reshape((1, *extents))  # noqa: E731
    cur = (as_chan(pt.I_m), as_chan(pt.y_m), as_chan(pt.I_f), as_chan(pt.y_f))
    fixed_img, fixed_msk = cur[2], cur[3]
    state = RecurrentState(cfg.levels)
    records = []
    for t in range(cfg.steps):
        x = ad.concat([cur[0], cur[1], fixed_img, fixed_msk], axis=0)
        try:
            v, _ = predict_velocity(x, state, params, cfg.levels, cfg.channels,
                                    cfg.leaky_alpha, cfg.full_res_flow)
        except FloatingPointError as err:
            raise EngineError(f"step {t + 1}: {err}") from err
        (new_m_img, new_m_msk, new_f_img, new_f_msk), record = _advance_step(cur, v, cfg)
        cur = (new_m_img, new_m_msk, new_f_img, new_f_msk)
        records.append(record)
    phi_final, phi_hat_final = final_fields(records)
    return records, phi_final, phi_hat_final


def run_velocities(pair, velocities, cfg: EngineConfig):
    """Chain given per-step velocity tensors over a pair (no network)."""
    pt = pair if isinstance(pair, PairTensors) else \
        pair_tensors(pair, cfg.cond_forward, cfg.cond_inverse)
    extents = pt.extents
    as_chan = lambda t: t.reshape((1, *extents))  # noqa: E731
    cur = (as_chan(pt.I_m), as_chan(pt.y_m), as_chan(pt.I_f), as_chan(pt.y_f))
    records = []
    for v in velocities:
        cur, record = _advance_step(cur, v, cfg)
        records.append(record)
    phi_final, phi_hat_final = final_fields(records)
    return records, phi_final, phi_hat_final


def clip_grad_norm(tensors, max_norm: float) -> float:
    """Scale the whole gradient set so its global L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for p in tensors:
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0.0:
        scale = np.float32(max_norm / norm)
        for p in tensors:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adaptive-moment gradient descent, beta=(0.9, 0.999), eps=1e-8."""

    def __init__(self, tensors, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.tensors = list(tensors)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.tensors]
        self.v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.tensors, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (lr / bias1) * m / (np.sqrt(v / bias2) + self.eps)
            p.data -= update.astype(np.float32)

    def zero_grad(self):
        for p in self.tensors:
            p.grad = None


def lr_at(epoch: int, cfg: EngineConfig) -> float:
    """Constant for the first half of the epochs, then linear decay to 0."""
    half = cfg.epochs // 2
    if cfg.epochs <= 1 or epoch < half:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / max(cfg.epochs - half, 1)


def train(dataset, cfg: EngineConfig, params: NetworkParams | None = None,
          log_fn=None):
    """Unsupervised training over a list of RegistrationPairs.

    Returns (params, history) where history holds one per-term mean row
    per epoch, in LOSS_COLUMNS order. Deterministic for a fixed config
    seed. Raises EngineError if the loss goes non-finite.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    pts = [pair_tensors(p, cfg.cond_forward, cfg.cond_inverse) for p in dataset]
    extents = {pt.extents for pt in pts}
    if len(extents) != 1:
        raise ShapeError(f"train: all pairs must share extents, got {sorted(extents)}")
    if params is None:
        params = init_params(cfg.levels, cfg.channels, cfg.seed,
                             full_res_flow=cfg.full_res_flow)
    opt = Adam(params.tensors())
    rng = np.random.default_rng(cfg.seed)
    history = []
    term_keys = ("sim", "sim_inv", "smooth", "smooth_inv", "pre", "ob", "total")
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pts))
        sums = dict.fromkeys(term_keys, 0.0)
        lr = lr_at(epoch, cfg)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                records, _, _ = forward_register(pts[idx], params, cfg)
                loss, terms = total_loss(
                    pts[idx], records, cfg.weights, cfg.smooth_normalized,
                    cfg.cond_forward, cfg.cond_inverse, cfg.sim_metric)
                if not np.isfinite(terms["total"]):
                    raise EngineError(f"non-finite loss at epoch {epoch}, pair {idx}")
                ad.backward(ad.scale(loss, 1.0 / len(batch)))
                for k in term_keys:
                    sums[k] += terms[k]
            if cfg.max_grad_norm is not None:
                clip_grad_norm(params.tensors(), cfg.max_grad_norm)
            opt.step(lr)
        row = {"epoch": epoch}
        row.update({k: sums[k] / len(pts) for k in term_keys})
        history.append(row)
        if log_fn is not None:
            log_fn(row)
    return params, history


def _expand_velocity(v_half: Tensor, extents) -> Tensor:
    """Half-resolution velocity to full grid: upsample and double the
    voxel-unit magnitudes."""
    up = ad.upsample2x_trilinear(v_half)
    for axis, ext in enumerate(extents, start=1):
        if up.shape[axis] != ext:
            up = ad.narrow(up, axis, 0, ext)
    return ad.scale(up, 2.0)


def optimize_pair(pair, cfg: EngineConfig):
    """Directly optimize T per-step velocity fields for one pair.

    Uses the identical objective as training but no network; serves as
    the reference registration. Velocities are parameterized at half
    resolution unless cfg.full_res_flow is set, mirroring the network's
    flow head. Returns (velocities, records, phi_final) with the
    velocities expanded to the full grid.
    """
    pt = pair if isinstance(pair, PairTensors) else \
        pair_tensors(pair, cfg.cond_forward, cfg.cond_inverse)
    d, h, w = pt.extents
    if cfg.full_res_flow:
        param_shape = (3, d, h, w)
    else:
        param_shape = (3, (d + 1) // 2, (h + 1) // 2, (w + 1) // 2)
    leaves = [Tensor(np.zeros(param_shape, dtype=np.float32), requires_grad=True)
              for _ in range(cfg.steps)]
    expand = (lambda t: t) if cfg.full_res_flow else \
        (lambda t: _expand_velocity(t, (d, h, w)))
    opt = Adam(leaves)
    for it in range(cfg.opt_iters):
        opt.zero_grad()
        records, _, _ = run_velocities(pt, [expand(t) for t in leaves], cfg)
        loss, terms = total_loss(pt, records, cfg.weights, cfg.smooth_normalized,
                                 cfg.cond_forward, cfg.cond_inverse, cfg.sim_metric)
        if not np.isfinite(terms["total"]):
            raise EngineError(f"non-finite loss at iteration {it}")
        ad.backward(loss)
        # linear decay over the closing quarter settles the iterates
        frac = it / max(cfg.opt_iters - 1, 1)
        lr = cfg.opt_lr if frac < 0.75 else cfg.opt_lr * (1.0 - frac) / 0.25
        opt.step(lr)
    velocities = [expand(t) for t in leaves]
    records, phi_final, _ = run_velocities(pt, velocities, cfg)
    return velocities, records, phi_final


# ---------------------------------------------------------------------------
# checkpoints and loss history
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: NetworkParams, cfg: EngineConfig) -> None:
    """Binary layout: magic 'TRCR', one version byte, uint32 LE header
    length, JSON header (config + ordered param names/shapes), then the
    float32 little-endian parameter buffers concatenated in order."""
    header = {
        "config": config_to_dict(cfg),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t in params.items():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version = struct.unpack("<B", f.read(1))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        blob_len = struct.unpack("<I", f.read(4))[0]
        header = json.loads(f.read(blob_len).decode("utf-8"))
        cfg = config_from_dict(header["config"])
        tensors, order = {}, []
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"checkpoint truncated at {entry['name']}")
            data = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            tensors[entry["name"]] = Tensor(data, requires_grad=True)
            order.append(entry["name"])
    expected = [name for name, _ in param_spec(
        cfg.levels, cfg.channels, full_res_flow=cfg.full_res_flow)]
    if order != expected:
        raise ValueError("checkpoint parameter list does not match its config")
    return NetworkParams(tensors, order), cfg


def write_loss_history(path, history) -> None:
    """Comma-separated rows: epoch, sim, sim_inv, smooth, smooth_inv, pre, ob, total."""
    with open(path, "w") as f:
        f.write(",".join(LOSS_COLUMNS) + "\n")
        for row in history:
            cells = [str(row["epoch"])] + [repr(float(row[k])) for k in LOSS_COLUMNS[1:]]
            f.write(",".join(cells) + "\n")


def read_loss_history(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
        if tuple(header) != LOSS_COLUMNS:
            raise ValueError(f"unexpected loss-history header: {header}")
        rows = []
        for line in f:
            parts = line.strip().split(",")
            row = {"epoch": int(parts[0])}
            row.update({k: float(v) for k, v in zip(LOSS_COLUMNS[1:], parts[1:])})
            rows.append(row)
    return rows
