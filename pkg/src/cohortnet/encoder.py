"""Multi-channel feature encoder.

Each feature owns a channel: a bounded bi-directional value embedding, an
interaction attention over the other features' embeddings, a local trend GRU,
an MLP fusing embedding/interaction/trend into a compact state vector, a
global GRU over those states, and a linear compressor whose outputs are
concatenated into the per-time patient representation.  A linear head on the
final-step representation gives the base (uncalibrated) logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Adam,
    ParamStore,
    Tensor,
    add_gru_params,
    concat,
    gru_cell_step,
    gru_weights,
    init_uniform,
)


class ConfigError(Exception):
    pass


@dataclass
class EncoderConfig:
    num_features: int
    num_steps: int
    d_e: int = 16
    d_t: int = 16
    d_o: int = 8
    d_h: int = 16
    d_p: int = 4
    lower: np.ndarray = None   # (F,) per-feature embedding bounds
    upper: np.ndarray = None

    def __post_init__(self):
        for name in ("d_e", "d_t", "d_o", "d_h", "d_p"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lower is None:
            self.lower = np.full(self.num_features, -3.0)
        if self.upper is None:
            self.upper = np.full(self.num_features, 3.0)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)


def init_encoder_params(config: EncoderConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    F = config.num_features
    d_e, d_t, d_o, d_h, d_p = (config.d_e, config.d_t, config.d_o,
                               config.d_h, config.d_p)
    store = ParamStore()
    for name in ("Va", "Vb", "Vm"):
        store.add(f"biel.{name}", init_uniform(rng, (F, 1, d_e), d_e))
    store.add("fil.W", init_uniform(rng, (d_e, d_e), d_e))
    store.add("fil.Wu", init_uniform(rng, (d_e, d_e), d_e))
    add_gru_params(store, "lgru", rng, d_e, d_t, bank=F)
    d_fus_in = 2 * d_e + d_t
    store.add("fus.W1", init_uniform(rng, (F, d_fus_in, 2 * d_o), d_fus_in))
    store.add("fus.b1", np.zeros((F, 1, 2 * d_o)))
    store.add("fus.W2", init_uniform(rng, (F, 2 * d_o, d_o), 2 * d_o))
    store.add("fus.b2", np.zeros((F, 1, d_o)))
    add_gru_params(store, "ggru", rng, d_o, d_h, bank=F)
    store.add("agg.W", init_uniform(rng, (F, d_h, d_p), d_h))
    store.add("head.w", init_uniform(rng, (F * d_p,), F * d_p))
    store.add("head.b", np.zeros(()))
    return store


def _batch_inputs(records, config: EncoderConfig):
    """Stack records into clipped values (F,T,B) and presence mask (F,B)."""
    F, T = config.num_features, config.num_steps
    B = len(records)
    X = np.zeros((F, T, B))
    present = np.zeros((F, B))
    for b, rec in enumerate(records):
        if rec.values.shape != (F, T):
            raise ConfigError(
                f"record {rec.id}: shape {rec.values.shape} != ({F}, {T})")
        X[:, :, b] = np.clip(rec.values, config.lower[:, None],
                             config.upper[:, None])
        present[:, b] = rec.present.astype(float)
    return X, present


def _fil_mask(F: int) -> np.ndarray:
    mask = np.zeros((F, F))
    np.fill_diagonal(mask, -np.inf)
    return mask


def encode_batch(params: ParamStore, config: EncoderConfig, X: np.ndarray,
                 present: np.ndarray, collect: bool = False) -> dict:
    """Run the full forward pass on a batch.

    X: (F, T, B) clipped standardized values; present: (F, B) 0/1 mask.
    Returns Tensors: 'logit' (B,), 'htilde_last' (B, F*d_p), 'h_last'
    (F, B, d_h); with collect=True also per-step lists e/alpha/u/v/o/h/htilde.
    """
    F, T = config.num_features, config.num_steps
    B = X.shape[2]
    d_e = config.d_e
    Va, Vb, Vm = params["biel.Va"], params["biel.Vb"], params["biel.Vm"]
    a = config.lower[:, None, None]
    b = config.upper[:, None, None]
    m = present[:, None, :].swapaxes(1, 2)          # (F, B, 1)
    fil_mask = _fil_mask(F)
    lg = gru_weights(params, "lgru")
    gg = gru_weights(params, "ggru")

    v_state = Tensor(np.zeros((F, B, config.d_t)))
    h_state = Tensor(np.zeros((F, B, config.d_h)))
    out = {"e": [], "alpha": [], "u": [], "v": [], "o": [], "h": [],
           "htilde": []}
    htilde_t = None
    for t in range(T):
        xp = X[:, t, :][:, :, None]                 # (F, B, 1) constant
        wa = (xp - a) / (b - a)
        wb = (b - xp) / (b - a)
        e_t = (Va * wa + Vb * wb) * m + Vm * (1.0 - m)   # (F, B, d_e)

        if F > 1:
            E = e_t.swapaxes(0, 1)                  # (B, F, d_e)
            scores = (E @ params["fil.W"]) @ E.swapaxes(1, 2)   # (B, F, F)
            alpha = scores.softmax(axis=-1, mask=fil_mask)
            u = alpha @ (E @ params["fil.Wu"])      # (B, F, d_e)
            u_t = u.swapaxes(0, 1)
        else:
            alpha = Tensor(np.zeros((B, 1, 1)))
            u_t = Tensor(np.zeros((1, B, d_e)))

        v_state = gru_cell_step(e_t, v_state, lg)

        fused_in = concat([e_t, u_t, v_state], axis=-1)
        hidden = (fused_in @ params["fus.W1"] + params["fus.b1"]).tanh()
        o_t = hidden @ params["fus.W2"] + params["fus.b2"]    # (F, B, d_o)

        h_state = gru_cell_step(o_t, h_state, gg)

        comp = h_state @ params["agg.W"]            # (F, B, d_p)
        htilde_t = comp.swapaxes(0, 1).reshape(B, F * config.d_p)

        if collect:
            out["e"].append(e_t)
            out["alpha"].append(alpha)
            out["u"].append(u_t)
            out["v"].append(v_state)
            out["htilde"].append(htilde_t)
        out["o"].append(o_t)
        out["h"].append(h_state)

    logit = htilde_t @ params["head.w"] + params["head.b"]
    return {
        "logit": logit,
        "htilde_last": htilde_t,
        "h_last": h_state,
        "steps": out,
    }


@dataclass
class EncoderOutput:
    """Per-patient forward-pass artifacts as plain arrays."""
    e: np.ndarray        # (F, T, d_e)
    alpha: np.ndarray    # (T, F, F); alpha[t, i, j], self weight zero
    u: np.ndarray        # (F, T, d_e)
    v: np.ndarray        # (F, T, d_t)
    o: np.ndarray        # (F, T, d_o)
    h: np.ndarray        # (F, T, d_h)
    htilde: np.ndarray   # (T, F*d_p)
    base_logit: float


def encode_patient(record, params: ParamStore, config: EncoderConfig) -> EncoderOutput:
    X, present = _batch_inputs([record], config)
    res = encode_batch(params, config, X, present, collect=True)
    steps = res["steps"]
    stack = lambda key, axes: np.stack([t.data for t in steps[key]], axis=axes)
    return EncoderOutput(
        e=stack("e", 1)[:, :, 0, :],
        alpha=np.stack([t.data[0] for t in steps["alpha"]], axis=0),
        u=stack("u", 1)[:, :, 0, :],
        v=stack("v", 1)[:, :, 0, :],
        o=stack("o", 1)[:, :, 0, :],
        h=stack("h", 1)[:, :, 0, :],
        htilde=np.stack([t.data[0] for t in steps["htilde"]], axis=0),
        base_logit=float(res["logit"].data[0]),
    )


# Functional views of the individual mechanisms (used heavily in tests).

def biel_embed(x_prime: float, present: bool, i: int, params: ParamStore,
               config: EncoderConfig) -> np.ndarray:
    if not present:
        return params["biel.Vm"].data[i, 0].copy()
    a, b = config.lower[i], config.upper[i]
    va = params["biel.Va"].data[i, 0]
    vb = params["biel.Vb"].data[i, 0]
    return (va * (x_prime - a) + vb * (b - x_prime)) / (b - a)


def fil_interact(embeddings: np.ndarray, params: ParamStore):
    """embeddings: (F, d_e) one time step -> (u (F, d_e), alpha (F, F))."""
    F = embeddings.shape[0]
    if F == 1:
        return np.zeros_like(embeddings), np.zeros((1, 1))
    E = Tensor(embeddings[None, :, :])
    scores = (E @ params["fil.W"]) @ E.swapaxes(1, 2)
    alpha = scores.softmax(axis=-1, mask=_fil_mask(F))
    u = alpha @ (E @ params["fil.Wu"])
    return u.data[0], alpha.data[0]


def ftl_trend(embeddings: np.ndarray, i: int, params: ParamStore,
              config: EncoderConfig) -> np.ndarray:
    """embeddings: (T, d_e) for feature i -> trend states (T, d_t)."""
    w = {k: Tensor(t.data[i]) for k, t in gru_weights(params, "lgru").items()}
    # banked biases are (1, d_t) after indexing; squeeze for the vector path
    for gate in ("z", "r", "h"):
        w[f"b{gate}"] = Tensor(w[f"b{gate}"].data[0])
    h = Tensor(np.zeros(config.d_t))
    states = []
    for t in range(embeddings.shape[0]):
        h = gru_cell_step(Tensor(embeddings[t]), h, w)
        states.append(h.data.copy())
    return np.stack(states)


def fea_fus(e: np.ndarray, u: np.ndarray, v: np.ndarray, i: int,
            params: ParamStore) -> np.ndarray:
    x = np.concatenate([e, u, v])
    hidden = np.tanh(x @ params["fus.W1"].data[i] + params["fus.b1"].data[i, 0])
    return hidden @ params["fus.W2"].data[i] + params["fus.b2"].data[i, 0]


def bce_from_logit(logit: Tensor, labels: np.ndarray) -> Tensor:
    p = logit.sigmoid().clamp(1e-7, 1.0 - 1e-7)
    y = np.asarray(labels, dtype=float)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


@dataclass
class TrainLog:
    epochs: int = 0
    train_loss: list = field(default_factory=list)
    valid_metric: list = field(default_factory=list)
    best_epoch: int = -1


def train_encoder(params: ParamStore, config: EncoderConfig, train_records,
                  valid_records, *, lr=1e-3, batch_size=64, epochs=30,
                  patience=5, seed=0) -> TrainLog:
    """Stage-1 training: base prediction head on BCE, early stop on
    validation average precision."""
    from .metrics import average_precision

    rng = np.random.default_rng(seed)
    Xv, pv = _batch_inputs(valid_records, config)
    yv = np.array([r.label for r in valid_records])
    log = TrainLog()
    best = (-np.inf, None)
    bad = 0
    adam = Adam(params, lr=lr)
    n = len(train_records)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            batch = [train_records[i] for i in order[start:start + batch_size]]
            X, present = _batch_inputs(batch, config)
            y = np.array([r.label for r in batch])
            res = encode_batch(params, config, X, present)
            loss = bce_from_logit(res["logit"], y)
            params.zero_grad()
            loss.backward()
            adam.step()
            losses.append(float(loss.data))
        scores = predict_scores(params, config, valid_records)
        try:
            metric = average_precision(scores, yv)
        except ValueError:
            metric = 0.0
        log.train_loss.append(float(np.mean(losses)))
        log.valid_metric.append(metric)
        log.epochs = epoch + 1
        if metric > best[0]:
            best = (metric, {k: params[k].data.copy() for k in params.names()})
            log.best_epoch = epoch
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                break
    if best[1] is not None:
        params.load_arrays(best[1])
    return log


def predict_scores(params: ParamStore, config: EncoderConfig, records,
                   batch_size=256) -> np.ndarray:
    out = []
    for start in range(0, len(records), batch_size):
        X, present = _batch_inputs(records[start:start + batch_size], config)
        res = encode_batch(params, config, X, present)
        out.append(1.0 / (1.0 + np.exp(-res["logit"].data)))
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class EncoderCache:
    """Frozen-encoder artifacts for every record, in record order."""
    alpha: np.ndarray        # (N, T, F, F)
    o: np.ndarray            # (N, T, F, d_o)
    h: np.ndarray            # (N, T, F, d_h)
    h_last: np.ndarray       # (N, F, d_h)
    htilde_last: np.ndarray  # (N, F*d_p)
    base_logit: np.ndarray   # (N,)


def encode_dataset(params: ParamStore, config: EncoderConfig, records,
                   batch_size=256) -> EncoderCache:
    F, T = config.num_features, config.num_steps
    N = len(records)
    alpha = np.zeros((N, T, F, F))
    o = np.zeros((N, T, F, config.d_o))
    h = np.zeros((N, T, F, config.d_h))
    h_last = np.zeros((N, F, config.d_h))
    htilde_last = np.zeros((N, F * config.d_p))
    base_logit = np.zeros(N)
    for start in range(0, N, batch_size):
        batch = records[start:start + batch_size]
        X, present = _batch_inputs(batch, config)
        res = encode_batch(params, config, X, present, collect=True)
        sl = slice(start, start + len(batch))
        steps = res["steps"]
        alpha[sl] = np.stack([a.data for a in steps["alpha"]], axis=1)
        o[sl] = np.stack([x.data.transpose(1, 0, 2) for x in steps["o"]], axis=1)
        h[sl] = np.stack([x.data.transpose(1, 0, 2) for x in steps["h"]], axis=1)
        h_last[sl] = res["h_last"].data.transpose(1, 0, 2)
        htilde_last[sl] = res["htilde_last"].data
        base_logit[sl] = res["logit"].data
    return EncoderCache(alpha, o, h, h_last, htilde_last, base_logit)
