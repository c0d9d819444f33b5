"""The conditioned LSTM report generator.

The exam embedding (max-aggregated view features, projected to the
hidden size E) is fed at t=0; START and the report words follow at
t>=1. The state update is

    h_t = f_t * h_{t-1} + i_t * tanh(W_hx x_t + W_hm m_{t-1} + b_h)
    m_t = o_t * tanh(h_t)

with i/f/o sigmoid gates, each an affine function of (x_t, m_{t-1}).
Note the naming: h is the memory/cell accumulator and m the exposed
output that feeds the softmax layer and the next step's gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bbox as bbox_mod
from . import tensor as T
from . import vision
from .errors import DataError
from .optim import Adam, Params
from .text import END_ID, PAD_ID, START_ID

GATES = ("i", "f", "o", "h")  # h = candidate ("input modulation")
INIT_SCALE = 0.08
FORGET_BIAS_INIT = 1.0


@dataclass
class LSTMState:
    h: T.Tensor  # memory accumulator
    m: T.Tensor  # exposed output, |m_j| <= 1


def zero_state(hidden_size, batch=None):
    shape = (hidden_size,) if batch is None else (batch, hidden_size)
    return LSTMState(h=T.Tensor(np.zeros(shape)), m=T.Tensor(np.zeros(shape)))


def init_lstm_params(params: Params, rng: np.random.Generator, hidden_size: int,
                     vocab_size: int):
    """Uniform(-0.08, 0.08) init, forget bias 1.0 (keeps early memory open)."""
    e, v = hidden_size, vocab_size

    def u(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, shape)

    for g in GATES:
        params.add(f"lstm.w_{g}x", u(e, e))
        params.add(f"lstm.w_{g}m", u(e, e))
    params.add("lstm.b_i", u(e))
    params.add("lstm.b_f", np.full(e, FORGET_BIAS_INIT))
    params.add("lstm.b_o", u(e))
    params.add("lstm.b_h", u(e))
    params.add("emb.w", u(v, e))
    params.add("out.w", u(e, v))
    params.add("out.b", u(v))


def init_model_params(vocab_size: int, config, rng: np.random.Generator) -> Params:
    params = Params()
    if config.feature_mode == "cnn":
        vision.init_cnn_params(params, rng, config.feature_size, channels=config.cnn_channels)
        if config.freeze_cnn:
            for name, t in params.items():
                if name.startswith("cnn."):
                    t.requires_grad = False
    vision.init_projection_params(params, rng, config.feature_size, config.hidden_size)
    init_lstm_params(params, rng, config.hidden_size, vocab_size)
    return params


def lstm_step(x, state: LSTMState, params: Params):
    """One step. x is (E,) or (B,E); returns (new state, logits)."""
    i = T.sigmoid(T.linear2(x, params["lstm.w_ix"], state.m, params["lstm.w_im"], params["lstm.b_i"]))
    f = T.sigmoid(T.linear2(x, params["lstm.w_fx"], state.m, params["lstm.w_fm"], params["lstm.b_f"]))
    o = T.sigmoid(T.linear2(x, params["lstm.w_ox"], state.m, params["lstm.w_om"], params["lstm.b_o"]))
    c = T.tanh(T.linear2(x, params["lstm.w_hx"], state.m, params["lstm.w_hm"], params["lstm.b_h"]))
    h = T.add(T.mul(f, state.h), T.mul(i, c))
    m = T.mul(o, T.tanh(h))
    logits = T.linear(m, params["out.w"], params["out.b"])
    return LSTMState(h=h, m=m), logits


def batched_unroll_loss(embeds: T.Tensor, ids: np.ndarray, mask: np.ndarray,
                        params: Params, normalize: bool = True):
    """NLL over a batch of encoded sequences conditioned on per-exam
    embeddings.

    embeds (B,E); ids/mask (B,L) with the layout of EncodedSequence. The
    image step t=0 contributes no loss term; step t>=1 consumes token
    ids[:, t] and is scored against ids[:, t+1] wherever mask[:, t+1]
    holds. Returns (loss, scored_steps).
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or mask.shape != ids.shape or embeds.data.shape[0] != ids.shape[0]:
        raise DataError(
            f"unroll: embeddings {embeds.data.shape} vs ids {ids.shape} / mask {mask.shape}"
        )
    L = ids.shape[1]
    target_cols = np.flatnonzero(mask[:, 2:].any(axis=0)) + 2  # >= 2: word/END targets
    if target_cols.size == 0:
        raise DataError("unroll: sequence batch is entirely masked out")
    last_step = int(target_cols.max()) - 1

    state = zero_state(embeds.data.shape[1], batch=ids.shape[0])
    total = None
    count = 0
    for t in range(0, last_step + 1):
        x = embeds if t == 0 else T.embedding_rows(params["emb.w"], ids[:, t])
        state, logits = lstm_step(x, state, params)
        if t >= 1 and t + 1 < L and mask[:, t + 1].any():
            step_loss, n = T.sequence_cross_entropy(logits, ids[:, t + 1], mask[:, t + 1])
            total = step_loss if total is None else T.add(total, step_loss)
            count += n
    if count == 0:
        raise DataError("unroll: no scored steps")
    return (T.mul(total, 1.0 / count) if normalize else total), count


def unroll_loss(exam_embedding: T.Tensor, seq, params: Params, normalize: bool = True) -> T.Tensor:
    """Loss of one encoded sequence given one exam embedding (E,)."""
    embeds = T.reshape(exam_embedding, (1, exam_embedding.data.shape[0]))
    loss, _ = batched_unroll_loss(embeds, seq.ids[None, :], seq.mask[None, :], params, normalize)
    return loss


# ---------------------------------------------------------------------------
# conditioning


def compute_exam_embedding(exam: vision.Exam, params: Params, config,
                           features=None, bbox_params: Params | None = None) -> T.Tensor:
    """views (or imported per-view features) -> max-aggregate -> project."""
    if features is not None:
        fvs = [
            f if isinstance(f, vision.FeatureVector)
            else vision.FeatureVector(values=T.Tensor(f), source="imported")
            for f in features
        ]
    else:
        if not exam.views:
            raise DataError(f"exam {exam.exam_id}: no views to embed")
        fvs = []
        for v in exam.views:
            if bbox_params is not None:
                box = bbox_mod.predict_bbox(v, bbox_params, input_size=config.image_size,
                                            channels=config.cnn_channels)
                v = bbox_mod.crop_to_bbox(v, box, out_size=config.image_size)
            elif v.pixels.shape != (config.image_size, config.image_size):
                v = vision.resize_pad(v, config.image_size)
            fvs.append(vision.cnn_extract(v, params, channels=config.cnn_channels))
    agg = vision.max_aggregate(fvs)
    return vision.project(agg, params)


# ---------------------------------------------------------------------------
# generation


def generate(exam: vision.Exam, params: Params, config, mode: str = "greedy",
             temperature: float = 1.0, rng: np.random.Generator | None = None,
             max_len: int | None = None, features=None,
             bbox_params: Params | None = None) -> list[int]:
    """Sample a report for one exam. Greedy mode takes the argmax each
    step (ties: lowest id); sample mode draws from softmax(logits/T).
    PAD and START are never emitted. The returned ids end with END unless
    max_len cut generation short; max_len defaults to config.max_gen_len.
    """
    if "emb.w" not in params:
        raise DataError("generate: params missing the language model (untrained?)")
    if mode not in ("greedy", "sample"):
        raise DataError(f"generate: unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise DataError("generate: sample mode needs an rng")
    if max_len is None:
        max_len = config.max_gen_len
    vocab_size = params["emb.w"].data.shape[0]
    out: list[int] = []
    with T.no_grad():
        embed = compute_exam_embedding(exam, params, config, features=features,
                                       bbox_params=bbox_params)
        state = zero_state(config.hidden_size)
        state, _ = lstm_step(embed, state, params)  # t = 0: image conditioning
        prev = START_ID
        while len(out) < max_len:
            x = T.embedding_rows(params["emb.w"], np.asarray(prev))
            state, logits = lstm_step(x, state, params)
            lv = logits.data.copy()
            lv[PAD_ID] = -np.inf
            lv[START_ID] = -np.inf
            if mode == "greedy":
                nxt = int(np.argmax(lv))
            else:
                p = np.exp((lv - np.max(lv)) / temperature)
                p /= p.sum()
                nxt = int(rng.choice(vocab_size, p=p))
            out.append(nxt)
            if nxt == END_ID:
                break
            prev = nxt
    return out


# ---------------------------------------------------------------------------
# training


def _batch_embeddings(samples, params: Params, config) -> T.Tensor:
    """Per-exam embeddings for a batch of TrainSamples, sharing one CNN
    forward over all views."""
    if config.feature_mode == "imported":
        agg = np.stack([s.features.max(axis=0) for s in samples])
        return T.linear(T.Tensor(agg), params["proj.w"], params["proj.b"])
    imgs = np.stack([img for s in samples for img in s.images])[:, None, :, :]
    feats = vision.cnn_forward(T.Tensor(imgs), params, channels=config.cnn_channels)
    parts = []
    lo = 0
    for s in samples:
        hi = lo + len(s.images)
        block = T.slice_rows(feats, lo, hi)
        parts.append(T.reshape(T.reduce_max(block, axis=0), (1, config.feature_size)))
        lo = hi
    agg = T.concat0(parts)
    return T.linear(agg, params["proj.w"], params["proj.b"])


def _batch_loss(samples, params: Params, config):
    embeds = _batch_embeddings(samples, params, config)
    ids = np.stack([s.ids for s in samples])
    mask = np.stack([s.mask for s in samples])
    return batched_unroll_loss(embeds, ids, mask, params, normalize=not config.loss_sum)


def _split_loss(samples, params: Params, config, batch_size):
    """Mean per-step NLL over a sample list, without touching grads."""
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            loss, n = batched_unroll_loss(
                _batch_embeddings(chunk, params, config),
                np.stack([s.ids for s in chunk]),
                np.stack([s.mask for s in chunk]),
                params, normalize=False,
            )
            total += float(loss.data)
            count += n
    return total / max(count, 1)


def train(dataset, config):
    """Mini-batch Adam over the prepared training split.

    Returns (params, log) where log rows are (epoch, train_loss,
    val_loss) mean-per-step NLL values. The best-validation parameters
    are restored before returning. Fully deterministic given config.seed.
    """
    if not dataset.train:
        raise DataError("train: empty training split")
    if not dataset.val:
        raise DataError("train: empty validation split")
    ss = np.random.SeedSequence(config.seed)
    init_seed, shuffle_seed = ss.spawn(2)
    init_rng = np.random.default_rng(init_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)

    params = init_model_params(len(dataset.vocab), config, init_rng)
    opt = Adam(params, alpha=config.learning_rate)
    log = []
    best_val = np.inf
    best_state = params.state_dict()
    bad_epochs = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(dataset.train))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = [dataset.train[i] for i in order[lo:lo + config.batch_size]]
            loss, n = _batch_loss(batch, params, config)
            T.backward(loss)
            opt.step()
            total += float(loss.data) * (n if not config.loss_sum else 1)
            count += n if not config.loss_sum else 1
        train_loss = total / max(count, 1)
        val_loss = _split_loss(dataset.val, params, config, config.batch_size)
        log.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_state = params.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break
        if config.target_train_loss > 0.0 and train_loss < config.target_train_loss:
            break

    params.load_state_dict(best_state)
    return params, log


def format_training_log(log) -> str:
    """epoch<TAB>train_loss<TAB>val_loss, one row per epoch."""
    lines = ["epoch\ttrain_loss\tval_loss"]
    for epoch, tr, va in log:
        lines.append(f"{epoch}\t{tr:.8f}\t{va:.8f}")
    return "\n".join(lines) + "\n"
