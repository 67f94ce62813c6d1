"""Conditioned recurrent sequence model with from-scratch backpropagation.

One gated recurrent architecture serves both pipeline stages: a conditioning
vector is projected into the initial hidden state, tokens are embedded and
fed through a standard LSTM cell, and an output projection produces
next-token logits.  Scoring is teacher-forced negative log-likelihood, which
makes "lowest loss" and "highest sequence likelihood" pick the same region
by construction.

Everything runs in float64 numpy; gradients are verified against central
finite differences (see :func:`grad_check`).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import BOS_ID, EOS_ID, UNK_ID, Vocabulary

FORMAT_VERSION = 1
_GATES = ("input", "forget", "output", "candidate")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow at extreme pre-activations
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class SeqModel:
    vocab: Vocabulary
    embed_dim: int
    hidden_dim: int
    cond_dim: int
    params: dict[str, np.ndarray]
    role: str = "semantic"

    def copy(self) -> "SeqModel":
        return SeqModel(vocab=self.vocab, embed_dim=self.embed_dim,
                        hidden_dim=self.hidden_dim, cond_dim=self.cond_dim,
                        params={k: v.copy() for k, v in self.params.items()},
                        role=self.role)

    @property
    def vocab_size(self) -> int:
        return self.vocab.size


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    grad_clip: float = 5.0
    optimizer: str = "adam"  # sgd | adam

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def init_model(vocab: Vocabulary, embed_dim: int, hidden_dim: int, cond_dim: int,
               seed: int, role: str = "semantic") -> SeqModel:
    """Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] init, forget-gate bias 1.0."""
    if min(embed_dim, hidden_dim, cond_dim) <= 0:
        raise ValueError("model dimensions must be positive")
    rng = np.random.default_rng(seed)
    v = vocab.size

    def uniform(shape, fan_in):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    params = {
        "emb": uniform((v, embed_dim), embed_dim),
        "cond_proj": uniform((cond_dim, hidden_dim), cond_dim),
        "w_cell": uniform((embed_dim + hidden_dim, 4 * hidden_dim), embed_dim + hidden_dim),
        "b_cell": np.zeros(4 * hidden_dim),
        "w_out": uniform((hidden_dim, v), hidden_dim),
        "b_out": np.zeros(v),
    }
    params["b_cell"][hidden_dim:2 * hidden_dim] = 1.0  # forget gate
    return SeqModel(vocab=vocab, embed_dim=embed_dim, hidden_dim=hidden_dim,
                    cond_dim=cond_dim, params=params, role=role)


def param_count(model: SeqModel) -> int:
    return sum(p.size for p in model.params.values())


def cell_step(model: SeqModel, input_embedding: np.ndarray,
              hidden_state: np.ndarray, cell_state: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step: gate order (input, forget, output, candidate)."""
    h = model.hidden_dim
    z = np.concatenate([input_embedding, hidden_state]) @ model.params["w_cell"] \
        + model.params["b_cell"]
    i = _sigmoid(z[:h])
    f = _sigmoid(z[h:2 * h])
    o = _sigmoid(z[2 * h:3 * h])
    g = np.tanh(z[3 * h:])
    cell_new = f * cell_state + i * g
    return o * np.tanh(cell_new), cell_new


# ---------------------------------------------------------------------------
# Batched teacher-forced forward / backward
# ---------------------------------------------------------------------------

def _pad_batch(token_seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs = BOS + tokens, targets = tokens + EOS, per-step validity mask."""
    batch = len(token_seqs)
    steps = max(len(t) for t in token_seqs) + 1
    inputs = np.full((batch, steps), EOS_ID, dtype=np.int64)
    targets = np.full((batch, steps), EOS_ID, dtype=np.int64)
    mask = np.zeros((batch, steps))
    for b, toks in enumerate(token_seqs):
        n = len(toks)
        inputs[b, 0] = BOS_ID
        inputs[b, 1:n + 1] = toks
        targets[b, :n] = toks
        targets[b, n] = EOS_ID
        mask[b, :n + 1] = 1.0
    return inputs, targets, mask


def _forward_batch(model: SeqModel, cond: np.ndarray, inputs: np.ndarray,
                   targets: np.ndarray, mask: np.ndarray, keep_cache: bool):
    p = model.params
    hdim = model.hidden_dim
    batch, steps = inputs.shape
    h = cond @ p["cond_proj"]
    c = np.zeros((batch, hdim))
    losses = np.zeros(batch)
    cache = {"cond": cond, "inputs": inputs, "targets": targets, "mask": mask,
             "steps": []} if keep_cache else None

    for t in range(steps):
        x = p["emb"][inputs[:, t]]
        xh = np.concatenate([x, h], axis=1)
        z = xh @ p["w_cell"] + p["b_cell"]
        i = _sigmoid(z[:, :hdim])
        f = _sigmoid(z[:, hdim:2 * hdim])
        o = _sigmoid(z[:, 2 * hdim:3 * hdim])
        g = np.tanh(z[:, 3 * hdim:])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        logits = h_new @ p["w_out"] + p["b_out"]
        log_probs = _log_softmax(logits)
        losses -= log_probs[np.arange(batch), targets[:, t]] * mask[:, t]
        if keep_cache:
            cache["steps"].append({"xh": xh, "i": i, "f": f, "o": o, "g": g,
                                   "c_prev": c, "c_new": c_new, "tanh_c": tanh_c,
                                   "h_new": h_new, "probs": np.exp(log_probs)})
        h, c = h_new, c_new
    return losses, cache


def _zero_grads(model: SeqModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def _backward_batch(model: SeqModel, cache: dict, weights: np.ndarray,
                    corrupt_gate: str | None = None):
    """Gradients of sum_b weights[b] * nll_b; also returns d(condition).

    ``corrupt_gate`` deliberately scales one gate's pre-activation gradient,
    used by the mutation test that proves the finite-difference check has
    teeth.
    """
    p = model.params
    hdim = model.hidden_dim
    e = model.embed_dim
    inputs, targets, mask = cache["inputs"], cache["targets"], cache["mask"]
    batch, steps = inputs.shape
    grads = _zero_grads(model)
    w = weights[:, None]

    dh_next = np.zeros((batch, hdim))
    dc_next = np.zeros((batch, hdim))
    for t in reversed(range(steps)):
        s = cache["steps"][t]
        dlogits = s["probs"].copy()
        dlogits[np.arange(batch), targets[:, t]] -= 1.0
        dlogits *= (mask[:, t:t + 1] * w)
        grads["w_out"] += s["h_new"].T @ dlogits
        grads["b_out"] += dlogits.sum(axis=0)
        dh = dlogits @ p["w_out"].T + dh_next

        do = dh * s["tanh_c"]
        dc = dc_next + dh * s["o"] * (1.0 - s["tanh_c"] ** 2)
        di = dc * s["g"]
        df = dc * s["c_prev"]
        dg = dc * s["i"]
        dc_next = dc * s["f"]

        dz = np.concatenate([
            di * s["i"] * (1.0 - s["i"]),
            df * s["f"] * (1.0 - s["f"]),
            do * s["o"] * (1.0 - s["o"]),
            dg * (1.0 - s["g"] ** 2),
        ], axis=1)
        if corrupt_gate is not None:
            gi = _GATES.index(corrupt_gate)
            dz[:, gi * hdim:(gi + 1) * hdim] *= 2.0

        grads["w_cell"] += s["xh"].T @ dz
        grads["b_cell"] += dz.sum(axis=0)
        dxh = dz @ p["w_cell"].T
        np.add.at(grads["emb"], inputs[:, t], dxh[:, :e])
        dh_next = dxh[:, e:]

    grads["cond_proj"] += cache["cond"].T @ dh_next
    dcond = dh_next @ p["cond_proj"].T
    return grads, dcond


def _check_tokens(model: SeqModel, tokens) -> list[int]:
    toks = list(tokens)
    if not toks:
        raise ValueError("token sequence must be non-empty")
    for t in toks:
        if not (0 <= t < model.vocab_size):
            raise ValueError(f"token id {t} outside vocabulary of size {model.vocab_size}")
    return toks


def sequence_nll(model: SeqModel, condition: np.ndarray, tokens) -> float:
    """Teacher-forced NLL of [tokens, EOS] given BOS start and the condition."""
    toks = _check_tokens(model, tokens)
    condition = np.asarray(condition, dtype=np.float64)
    if condition.shape != (model.cond_dim,):
        raise ValueError(f"condition must have shape ({model.cond_dim},)")
    inputs, targets, mask = _pad_batch([toks])
    losses, _ = _forward_batch(model, condition[None, :], inputs, targets, mask,
                               keep_cache=False)
    return float(losses[0])


def sequence_nll_batch(model: SeqModel, conditions: np.ndarray,
                       token_seqs: list[list[int]]) -> np.ndarray:
    """Vectorized NLL for many (condition, tokens) pairs at once."""
    for toks in token_seqs:
        _check_tokens(model, toks)
    inputs, targets, mask = _pad_batch([list(t) for t in token_seqs])
    losses, _ = _forward_batch(model, np.asarray(conditions, dtype=np.float64),
                               inputs, targets, mask, keep_cache=False)
    return losses


def teacher_forced_log_probs(model: SeqModel, condition: np.ndarray, tokens
                             ) -> np.ndarray:
    """Per-step log-probability rows (len(tokens)+1, vocab); test/diagnostic aid."""
    toks = _check_tokens(model, tokens)
    p = model.params
    h = np.asarray(condition, dtype=np.float64) @ p["cond_proj"]
    c = np.zeros(model.hidden_dim)
    rows = []
    for tok in [BOS_ID] + toks:
        x = p["emb"][tok]
        h, c = cell_step(model, x, h, c)
        rows.append(_log_softmax(h @ p["w_out"] + p["b_out"]))
    return np.stack(rows)


def generate_caption(model: SeqModel, condition: np.ndarray, max_len: int = 8
                     ) -> list[str]:
    """Greedy decode; ties resolve to the lowest token id.

    BOS and UNK are never emitted, and EOS terminates only when it strictly
    beats the best word token (so an all-zero model repeats the lowest-id
    word until ``max_len``).
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if model.vocab_size <= UNK_ID + 1:  # no word tokens beyond the specials
        return []
    p = model.params
    h = np.asarray(condition, dtype=np.float64) @ p["cond_proj"]
    c = np.zeros(model.hidden_dim)
    token = BOS_ID
    out: list[str] = []
    first_word = UNK_ID + 1
    for _ in range(max_len):
        h, c = cell_step(model, p["emb"][token], h, c)
        logits = h @ p["w_out"] + p["b_out"]
        best = int(np.argmax(logits[first_word:])) + first_word
        if logits[EOS_ID] > logits[best]:
            break
        out.append(model.vocab.id_to_token[best])
        token = best
    return out


def generate_caption_batch(model: SeqModel, conditions: np.ndarray,
                           max_len: int = 8) -> list[list[str]]:
    """Greedy decode for many conditions at once (same per-row rule as
    generate_caption)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    conditions = np.asarray(conditions, dtype=np.float64)
    batch = conditions.shape[0]
    if model.vocab_size <= UNK_ID + 1:
        return [[] for _ in range(batch)]
    p = model.params
    hdim = model.hidden_dim
    first_word = UNK_ID + 1
    h = conditions @ p["cond_proj"]
    c = np.zeros((batch, hdim))
    tokens = np.full(batch, BOS_ID, dtype=np.int64)
    alive = np.ones(batch, dtype=bool)
    outs: list[list[str]] = [[] for _ in range(batch)]
    for _ in range(max_len):
        x = p["emb"][tokens]
        xh = np.concatenate([x, h], axis=1)
        z = xh @ p["w_cell"] + p["b_cell"]
        i = _sigmoid(z[:, :hdim])
        f = _sigmoid(z[:, hdim:2 * hdim])
        o = _sigmoid(z[:, 2 * hdim:3 * hdim])
        g = np.tanh(z[:, 3 * hdim:])
        c = f * c + i * g
        h = o * np.tanh(c)
        logits = h @ p["w_out"] + p["b_out"]
        best = np.argmax(logits[:, first_word:], axis=1) + first_word
        stop = logits[np.arange(batch), EOS_ID] > logits[np.arange(batch), best]
        alive &= ~stop
        if not alive.any():
            break
        for b in np.flatnonzero(alive):
            outs[b].append(model.vocab.id_to_token[int(best[b])])
        tokens = np.where(alive, best, EOS_ID)
    return outs


# ---------------------------------------------------------------------------
# Optimizers and the training loop
# ---------------------------------------------------------------------------

class _Optimizer:
    def __init__(self, config: TrainConfig, params: dict[str, np.ndarray]):
        self.config = config
        if config.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
            self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        lr = self.config.learning_rate
        if self.config.optimizer == "sgd":
            for k in params:
                params[k] -= lr * grads[k]
            return
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        correction = math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for k in params:
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * grads[k]
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * grads[k] ** 2
            params[k] -= lr * correction * self.m[k] / (np.sqrt(self.v[k]) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def train(model: SeqModel, dataset: list[tuple[np.ndarray, list[int]]],
          config: TrainConfig) -> tuple[SeqModel, list[float]]:
    """Mini-batch BPTT training; returns (trained copy, per-epoch mean losses)."""
    if not dataset:
        raise ValueError("training dataset must be non-empty")
    for cond, toks in dataset:
        _check_tokens(model, toks)
        if np.asarray(cond).shape != (model.cond_dim,):
            raise ValueError("condition dimension mismatch")

    trained = model.copy()
    optimizer = _Optimizer(config, trained.params)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    history: list[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            conds = np.stack([np.asarray(dataset[int(i)][0], dtype=np.float64) for i in idx])
            seqs = [list(dataset[int(i)][1]) for i in idx]
            inputs, targets, mask = _pad_batch(seqs)
            losses, cache = _forward_batch(trained, conds, inputs, targets, mask,
                                           keep_cache=True)
            if not np.all(np.isfinite(losses)):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch + 1}: {losses.tolist()}")
            epoch_loss += float(losses.sum())
            grads, _ = _backward_batch(trained, cache,
                                       weights=np.full(len(idx), 1.0 / len(idx)))
            clip_gradients(grads, config.grad_clip)
            optimizer.step(trained.params, grads)
        history.append(epoch_loss / n)
    return trained, history


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

GRAD_NOISE_FLOOR = 2e-5


def grad_check(model: SeqModel, example: tuple[np.ndarray, list[int]],
               epsilon: float = 1e-5, n_coords: int = 200, seed: int = 0,
               corrupt_gate: str | None = None,
               noise_floor: float = GRAD_NOISE_FLOOR) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``n_coords`` parameter coordinates; relative error uses
    |a - n| / max(|a|, |n|, 1e-12).  Coordinates where both gradients sit
    below ``noise_floor`` carry no finite-difference information (the
    difference quotient bottoms out near 1e-9 for this loss scale) and
    report as 0, like the exact-zero case.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    condition, tokens = example
    condition = np.asarray(condition, dtype=np.float64)
    toks = _check_tokens(model, tokens)
    inputs, targets, mask = _pad_batch([toks])

    def loss_with(params: dict[str, np.ndarray]) -> float:
        probe = SeqModel(vocab=model.vocab, embed_dim=model.embed_dim,
                         hidden_dim=model.hidden_dim, cond_dim=model.cond_dim,
                         params=params, role=model.role)
        losses, _ = _forward_batch(probe, condition[None, :], inputs, targets,
                                   mask, keep_cache=False)
        return float(losses[0])

    _, cache = _forward_batch(model, condition[None, :], inputs, targets, mask,
                              keep_cache=True)
    analytic, _ = _backward_batch(model, cache, weights=np.ones(1),
                                  corrupt_gate=corrupt_gate)

    names = sorted(model.params)
    sizes = [model.params[k].size for k in names]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)

    worst = 0.0
    for flat in sorted(int(c) for c in coords):
        for name, size in zip(names, sizes):
            if flat < size:
                break
            flat -= size
        index = np.unravel_index(flat, model.params[name].shape)
        perturbed = {k: v.copy() for k, v in model.params.items()}
        perturbed[name][index] += epsilon
        loss_plus = loss_with(perturbed)
        perturbed[name][index] -= 2.0 * epsilon
        loss_minus = loss_with(perturbed)
        numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
        a = float(analytic[name][index])
        if max(abs(a), abs(numeric)) <= noise_floor:
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Model bundle serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: SeqModel, extra: dict | None = None) -> dict:
    out = {
        "format_version": FORMAT_VERSION,
        "role": model.role,
        "dims": {
            "vocab_size": model.vocab_size,
            "embed_dim": model.embed_dim,
            "hidden_dim": model.hidden_dim,
            "cond_dim": model.cond_dim,
        },
        "vocabulary": list(model.vocab.id_to_token),
        "params": {k: v.tolist() for k, v in model.params.items()},
    }
    if extra:
        out.update(copy.deepcopy(extra))
    return out


def model_from_dict(data: dict) -> SeqModel:
    if data.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported bundle format {data.get('format_version')!r}")
    tokens = data["vocabulary"]
    if tuple(tokens[:3]) != ("<bos>", "<eos>", "<unk>"):
        raise ValueError("bundle vocabulary missing special tokens")
    vocab = Vocabulary.from_tokens(list(tokens[3:]))
    dims = data["dims"]
    params = {k: np.array(v, dtype=np.float64) for k, v in data["params"].items()}
    model = SeqModel(vocab=vocab, embed_dim=dims["embed_dim"],
                     hidden_dim=dims["hidden_dim"], cond_dim=dims["cond_dim"],
                     params=params, role=data["role"])
    if vocab.size != dims["vocab_size"]:
        raise ValueError("vocabulary size mismatch in bundle")
    return model


def save_model(model: SeqModel, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, extra)), encoding="utf-8")


def load_model(path: str | Path) -> tuple[SeqModel, dict]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    model = model_from_dict(data)
    known = {"format_version", "role", "dims", "vocabulary", "params"}
    extra = {k: v for k, v in data.items() if k not in known}
    extra["dims"] = data["dims"]
    return model, extra
