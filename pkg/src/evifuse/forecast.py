"""
Multi-feature LSTM regressor in plain numpy.

Each layer uses separate input and recurrent matrices per gate:

    i = sigmoid(Wi x + Ui h + bi)        f = sigmoid(Wf x + Uf h + bf)
    o = sigmoid(Wo x + Uo h + bo)        g = tanh(Wc x + Uc h + bc)
    c' = f * c + i * g                   h' = o * tanh(c')

Layer ``l > 0`` takes layer ``l - 1``'s hidden output at the same step as its
input.  An affine head maps the top hidden state to one scalar per step.
Arrays may carry a leading batch axis; everything is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np

INIT_SCALE = 0.08
CHECKPOINT_FORMAT = "evifuse-lstm/1"

_INPUT = ("wi", "wf", "wc", "wo")
_RECURRENT = ("ui", "uf", "uc", "uo")
_BIAS = ("bi", "bf", "bc", "bo")


class ForecastError(ValueError):
    pass


class TrainingDivergedError(ForecastError):
    def __init__(self, epoch: int, loss: float) -> None:
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class LayerParams:
    wi: np.ndarray
    wf: np.ndarray
    wc: np.ndarray
    wo: np.ndarray
    ui: np.ndarray
    uf: np.ndarray
    uc: np.ndarray
    uo: np.ndarray
    bi: np.ndarray
    bf: np.ndarray
    bc: np.ndarray
    bo: np.ndarray


@dataclass
class LstmParams:
    layers: list[LayerParams]
    head_w: np.ndarray  # (hidden,)
    head_b: np.ndarray  # (1,)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ForecastError("at least one layer required")
        h = self.hidden_size
        for l, layer in enumerate(self.layers):
            n_in = self.input_size if l == 0 else h
            for name in _INPUT:
                _expect(getattr(layer, name), (h, n_in), f"layers[{l}].{name}")
            for name in _RECURRENT:
                _expect(getattr(layer, name), (h, h), f"layers[{l}].{name}")
            for name in _BIAS:
                _expect(getattr(layer, name), (h,), f"layers[{l}].{name}")
        _expect(self.head_w, (h,), "head_w")
        _expect(self.head_b, (1,), "head_b")
        for name, arr in self.named_arrays():
            if not np.all(np.isfinite(arr)):
                raise ForecastError(f"{name} contains non-finite values")

    @property
    def hidden_size(self) -> int:
        return self.layers[0].wi.shape[0]

    @property
    def input_size(self) -> int:
        return self.layers[0].wi.shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every parameter array in a fixed order (also the flattening order)."""
        for l, layer in enumerate(self.layers):
            for f in fields(LayerParams):
                yield f"layers.{l}.{f.name}", getattr(layer, f.name)
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    @property
    def size(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])

    def with_vector(self, vec: np.ndarray) -> LstmParams:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ForecastError(f"expected vector of length {self.size}, got {vec.shape}")
        it = iter(_split(vec, [a for _, a in self.named_arrays()]))
        layers = [LayerParams(**{f.name: next(it) for f in fields(LayerParams)}) for _ in self.layers]
        return LstmParams(layers, next(it), next(it))

    def zeros_like(self) -> LstmParams:
        return self.with_vector(np.zeros(self.size))

    def copy(self) -> LstmParams:
        return self.with_vector(self.to_vector())


def _expect(arr: np.ndarray, shape: tuple[int, ...], name: str) -> None:
    if not isinstance(arr, np.ndarray) or arr.shape != shape:
        got = getattr(arr, "shape", type(arr).__name__)
        raise ForecastError(f"{name}: expected shape {shape}, got {got}")


def _split(vec: np.ndarray, like: list[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(vec[pos : pos + a.size].reshape(a.shape).copy())
        pos += a.size
    return out


def init_params(input_size: int, hidden_size: int, num_layers: int = 1, seed: int = 0,
                scale: float = INIT_SCALE) -> LstmParams:
    """Uniform ``[-scale, scale]`` initialization, fully determined by ``seed``."""
    if min(input_size, hidden_size, num_layers) < 1:
        raise ForecastError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    for l in range(num_layers):
        n_in = input_size if l == 0 else hidden_size
        arrays = {}
        for name in _INPUT:
            arrays[name] = rng.uniform(-scale, scale, (hidden_size, n_in))
        for name in _RECURRENT:
            arrays[name] = rng.uniform(-scale, scale, (hidden_size, hidden_size))
        for name in _BIAS:
            arrays[name] = rng.uniform(-scale, scale, hidden_size)
        layers.append(LayerParams(**arrays))
    head_w = rng.uniform(-scale, scale, hidden_size)
    head_b = rng.uniform(-scale, scale, 1)
    return LstmParams(layers, head_w, head_b)


def zero_params(input_size: int, hidden_size: int, num_layers: int = 1) -> LstmParams:
    return init_params(input_size, hidden_size, num_layers, scale=0.0)


# -- forward ------------------------------------------------------------------

class CellState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


LstmState = tuple[CellState, ...]


def zero_state(params: LstmParams, batch: int | None = None) -> LstmState:
    shape = (params.hidden_size,) if batch is None else (batch, params.hidden_size)
    return tuple(CellState(np.zeros(shape), np.zeros(shape)) for _ in params.layers)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class _StepCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def _cell(p: LayerParams, x: np.ndarray, h: np.ndarray, c: np.ndarray) -> _StepCache:
    i = sigmoid(x @ p.wi.T + h @ p.ui.T + p.bi)
    f = sigmoid(x @ p.wf.T + h @ p.uf.T + p.bf)
    o = sigmoid(x @ p.wo.T + h @ p.uo.T + p.bo)
    g = np.tanh(x @ p.wc.T + h @ p.uc.T + p.bc)
    c_new = f * c + i * g
    return _StepCache(x, h, c, i, f, o, g, c_new, np.tanh(c_new))


def cell_forward(params: LstmParams, layer: int, x: np.ndarray, prev: CellState) -> tuple[CellState, np.ndarray]:
    """Advance one layer by one step.  Returns the new state and its hidden output."""
    if not 0 <= layer < params.num_layers:
        raise ForecastError(f"layer {layer} out of range")
    x = np.asarray(x, dtype=np.float64)
    n_in = params.input_size if layer == 0 else params.hidden_size
    if x.shape[-1] != n_in:
        raise ForecastError(f"layer {layer} expects input size {n_in}, got {x.shape[-1]}")
    if prev.h.shape[-1] != params.hidden_size or prev.c.shape[-1] != params.hidden_size:
        raise ForecastError("state size does not match hidden size")
    if not np.all(np.isfinite(x)):
        raise ForecastError("non-finite input")
    step = _cell(params.layers[layer], x, prev.h, prev.c)
    h = step.o * step.tanh_c
    return CellState(h, step.c), h


def _as_batch(sequence: np.ndarray, params: LstmParams) -> tuple[np.ndarray, bool]:
    x = np.asarray(sequence, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ForecastError(f"expected (steps, features) or (batch, steps, features), got shape {x.shape}")
    if x.shape[1] == 0:
        raise ForecastError("empty sequence")
    if x.shape[2] != params.input_size:
        raise ForecastError(f"expected {params.input_size} features, got {x.shape[2]}")
    if not np.all(np.isfinite(x)):
        raise ForecastError("non-finite input")
    return x, single


def _run(params: LstmParams, x: np.ndarray, initial: LstmState | None):
    n, steps, _ = x.shape
    state = list(initial) if initial is not None else list(zero_state(params, n))
    preds = np.empty((n, steps))
    caches: list[list[_StepCache]] = []
    for t in range(steps):
        inp = x[:, t, :]
        layer_caches = []
        for l, p in enumerate(params.layers):
            st = _cell(p, inp, state[l].h, state[l].c)
            h = st.o * st.tanh_c
            state[l] = CellState(h, st.c)
            layer_caches.append(st)
            inp = h
        caches.append(layer_caches)
        preds[:, t] = inp @ params.head_w + params.head_b[0]
    return preds, tuple(state), caches


def forward_sequence(params: LstmParams, sequence: np.ndarray,
                     initial: LstmState | None = None) -> tuple[np.ndarray, LstmState]:
    """Run the stack over ``sequence``; returns per-step predictions and the final state.

    ``sequence`` is ``(steps, features)`` or batched ``(batch, steps, features)``;
    predictions take the matching ``(steps,)`` or ``(batch, steps)`` shape.
    """
    x, single = _as_batch(sequence, params)
    if initial is not None and single:
        initial = tuple(CellState(s.h[None], s.c[None]) for s in initial)
    preds, state, _ = _run(params, x, initial)
    if single:
        return preds[0], tuple(CellState(s.h[0], s.c[0]) for s in state)
    return preds, state


# -- loss and gradients -------------------------------------------------------

def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.size == 0:
        raise ForecastError("empty predictions")
    if p.shape != y.shape:
        raise ForecastError(f"length mismatch: {p.size} predictions vs {y.size} targets")
    return float(np.mean((p - y) ** 2))


def _supervision(x: np.ndarray, targets, single: bool) -> tuple[np.ndarray, np.ndarray]:
    """Return (targets, mask) shaped ``(batch, steps)``.

    Targets shaped like the batch (one per sequence) supervise only the last
    step; targets with a steps axis supervise every step.
    """
    n, steps, _ = x.shape
    y = np.asarray(targets, dtype=np.float64)
    if single:
        y = y.reshape(1, -1) if y.ndim == 1 else y.reshape(1, 1)
    elif y.ndim == 1:
        y = y.reshape(n, 1)
    full = np.zeros((n, steps))
    mask = np.zeros((n, steps), dtype=bool)
    if y.shape == (n, steps):
        full[:] = y
        mask[:] = True
    elif y.shape == (n, 1):
        full[:, -1] = y[:, 0]
        mask[:, -1] = True
    else:
        raise ForecastError(f"targets of shape {np.shape(targets)} do not fit inputs of shape {x.shape}")
    return full, mask


def loss_and_grad(params: LstmParams, sequence, targets,
                  truncation: int | None = None) -> tuple[float, LstmParams]:
    """MSE loss and its exact gradient by backpropagation through time.

    With ``truncation=k`` the sequence is cut into chunks of ``k`` steps
    (counted back from the last step) and no gradient crosses a chunk
    boundary through the recurrent state.
    """
    x, single = _as_batch(sequence, params)
    y, mask = _supervision(x, targets, single)
    if truncation is not None and truncation < 1:
        raise ForecastError("truncation length must be >= 1")
    preds, _, caches = _run(params, x, None)
    err = np.where(mask, preds - y, 0.0)
    count = mask.sum()
    loss = float(np.sum(err ** 2) / count)
    dpred = 2.0 * err / count

    grads = params.zeros_like()
    n, steps, _ = x.shape
    hidden = params.hidden_size
    dh_next = [np.zeros((n, hidden)) for _ in params.layers]
    dc_next = [np.zeros((n, hidden)) for _ in params.layers]

    for t in range(steps - 1, -1, -1):
        dy = dpred[:, t]
        top = caches[t][-1]
        h_top = top.o * top.tanh_c
        grads.head_w += dy @ h_top
        grads.head_b += dy.sum()
        dh_above = dy[:, None] * params.head_w
        for l in range(params.num_layers - 1, -1, -1):
            p, g, st = params.layers[l], grads.layers[l], caches[t][l]
            dh = dh_above + dh_next[l]
            do = dh * st.tanh_c
            dc = dc_next[l] + dh * st.o * (1.0 - st.tanh_c ** 2)
            dzi = dc * st.g * st.i * (1.0 - st.i)
            dzf = dc * st.c_prev * st.f * (1.0 - st.f)
            dzo = do * st.o * (1.0 - st.o)
            dzg = dc * st.i * (1.0 - st.g ** 2)
            dx = np.zeros_like(st.x)
            dh_prev = np.zeros_like(st.h_prev)
            for dz, w, u, b in ((dzi, "wi", "ui", "bi"), (dzf, "wf", "uf", "bf"),
                                (dzo, "wo", "uo", "bo"), (dzg, "wc", "uc", "bc")):
                getattr(g, w)[...] += dz.T @ st.x
                getattr(g, u)[...] += dz.T @ st.h_prev
                getattr(g, b)[...] += dz.sum(axis=0)
                dx += dz @ getattr(p, w)
                dh_prev += dz @ getattr(p, u)
            dh_next[l] = dh_prev
            dc_next[l] = dc * st.f
            dh_above = dx
        if truncation is not None and (steps - t) % truncation == 0:
            dh_next = [np.zeros_like(a) for a in dh_next]
            dc_next = [np.zeros_like(a) for a in dc_next]

    vec = grads.to_vector()
    if not np.all(np.isfinite(vec)) or not math.isfinite(loss):
        raise ForecastError("non-finite values during backpropagation")
    return loss, grads


def backward(params: LstmParams, sequence, targets, truncation: int | None = None) -> LstmParams:
    """Gradient of :func:`mse_loss` with respect to every parameter."""
    return loss_and_grad(params, sequence, targets, truncation)[1]


def sequence_loss(params: LstmParams, sequence, targets) -> float:
    x, single = _as_batch(sequence, params)
    y, mask = _supervision(x, targets, single)
    preds, _, _ = _run(params, x, None)
    return float(np.sum(np.where(mask, preds - y, 0.0) ** 2) / mask.sum())


def grad_check(params: LstmParams, sequence, targets, eps: float = 1e-5,
               grad_fn: Callable[..., LstmParams] | None = None) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative gap per parameter is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not eps > 0.0:
        raise ForecastError(f"eps must be positive, got {eps}")
    grad_fn = grad_fn or backward
    analytic = grad_fn(params, sequence, targets).to_vector()
    theta = params.to_vector()
    worst = 0.0
    for k in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[k] += eps
        minus[k] -= eps
        numeric = (sequence_loss(params.with_vector(plus), sequence, targets)
                   - sequence_loss(params.with_vector(minus), sequence, targets)) / (2.0 * eps)
        denom = max(abs(analytic[k]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[k] - numeric) / denom)
    return worst


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 1000
    learning_rate: float = 0.5
    hidden_size: int = 16
    num_layers: int = 1
    seed: int = 0
    truncation_length: int | None = None  # None: full window
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.hidden_size < 1 or self.num_layers < 1:
            raise ForecastError("epochs, hidden_size and num_layers must be >= 1")
        if not self.learning_rate > 0:
            raise ForecastError("learning_rate must be > 0")
        if self.truncation_length is not None and self.truncation_length < 1:
            raise ForecastError("truncation_length must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ForecastError("clip_norm must be > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ForecastError("seed must be a 64-bit unsigned integer")


def _xy(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple):
        x, y = samples
    else:
        x, y = samples.inputs, samples.targets
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or len(x) == 0:
        raise ForecastError("need a nonempty (samples, steps, features) array")
    if y.shape != (len(x),):
        raise ForecastError(f"expected {len(x)} targets, got shape {y.shape}")
    return x, y


def train(samples, config: TrainingConfig = TrainingConfig(),
          history: list[float] | None = None) -> LstmParams:
    """Full-batch gradient descent on MSE.

    ``samples`` is a SampleSet or an ``(inputs, targets)`` pair.  If given,
    ``history`` receives the loss before every update plus the final loss,
    so ``history[-1]`` is the training loss of the returned parameters.
    """
    x, y = _xy(samples)
    params = init_params(x.shape[2], config.hidden_size, config.num_layers, config.seed)
    theta = params.to_vector()
    for epoch in range(config.epochs):
        try:
            with np.errstate(over="raise", invalid="raise"):
                loss, grads = loss_and_grad(params, x, y, config.truncation_length)
        except (ForecastError, FloatingPointError):
            raise TrainingDivergedError(epoch, math.nan) from None
        if not math.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        if history is not None:
            history.append(loss)
        step = grads.to_vector()
        if config.clip_norm is not None:
            norm = float(np.linalg.norm(step))
            if norm > config.clip_norm:
                step = step * (config.clip_norm / norm)
        theta = theta - config.learning_rate * step
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergedError(epoch, loss)
        params = params.with_vector(theta)
    with np.errstate(over="ignore", invalid="ignore"):
        final = sequence_loss(params, x, y)
    if not math.isfinite(final):
        raise TrainingDivergedError(config.epochs, final)
    if history is not None:
        history.append(final)
    return params


def predict(params: LstmParams, samples) -> np.ndarray:
    """One normalized load prediction per sample: the last step's output."""
    x = samples if isinstance(samples, np.ndarray) else samples.inputs
    preds, _ = forward_sequence(params, np.asarray(x, dtype=np.float64).reshape(-1, *np.shape(x)[-2:]))
    return preds[:, -1]


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, params: LstmParams, config: TrainingConfig | None = None,
                    extra: dict | None = None) -> None:
    """Write dims, config and all parameters (row-major) as JSON."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "input_size": params.input_size,
        "hidden_size": params.hidden_size,
        "num_layers": params.num_layers,
        "config": asdict(config) if config is not None else None,
        "extra": extra or {},
        "params": {name: {"shape": list(a.shape), "data": a.ravel().tolist()}
                   for name, a in params.named_arrays()},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: str | Path) -> tuple[LstmParams, TrainingConfig | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ForecastError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    template = zero_params(doc["input_size"], doc["hidden_size"], doc["num_layers"])
    arrays = []
    for name, a in template.named_arrays():
        entry = doc["params"][name]
        if tuple(entry["shape"]) != a.shape:
            raise ForecastError(f"{path}: {name} has shape {entry['shape']}, expected {list(a.shape)}")
        arrays.append(np.asarray(entry["data"], dtype=np.float64))
    params = template.with_vector(np.concatenate(arrays))
    config = TrainingConfig(**doc["config"]) if doc.get("config") else None
    return params, config, doc.get("extra", {})
