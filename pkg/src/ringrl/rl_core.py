"""Actor-critic networks and the PPO update, written directly in numpy.

Gradients are derived by hand for a tanh multilayer perceptron; there is no
general autodiff here.  All arithmetic is float64.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

N_ACTIONS = 8
STATE_DIM = 18
MASK_LOGIT = -1e9

# fixed input scaling: lane counts ~ tens of vehicles, green durations ~ tens of seconds
OBS_SCALE = np.array([0.1] * 10 + [1.0 / 30.0] * 8)


class ContractViolation(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class Mlp:
    """tanh MLP with identity output; parameters live in one flat float64 vector."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 out_gain: float = 1.0, hidden_gain: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.n_params = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        self.params = np.zeros(self.n_params)
        self._bind()
        if rng is not None:
            n_layers = len(self.sizes) - 1
            for k, (w, b) in enumerate(zip(self.weights, self.biases)):
                gain = out_gain if k == n_layers - 1 else hidden_gain
                w[...] = _orthogonal(rng, w.shape[0], w.shape[1], gain)
                b[...] = 0.0

    def _bind(self) -> None:
        self.weights, self.biases = [], []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.params[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.params[off:off + b])
            off += b

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise CheckpointError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.params[...] = flat

    def copy(self) -> "Mlp":
        out = Mlp(self.sizes)
        out.set_params(self.params)
        return out

    def forward(self, x: np.ndarray, keep: bool = False):
        h = np.atleast_2d(x)
        acts = [h]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list, grad_out: np.ndarray) -> np.ndarray:
        grad = np.zeros(self.n_params)
        gw, gb = [], []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            gw.append(grad[off:off + a * b].reshape(a, b))
            off += a * b
            gb.append(grad[off:off + b])
            off += b
        g = grad_out
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = acts[k]
            gw[k][...] = h_in.T @ g
            gb[k][...] = g.sum(axis=0)
            if k > 0:
                g = (g @ self.weights[k].T) * (1.0 - h_in * h_in)
        return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        if lr == 0:
            return
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    entropy_coef: float = 0.01
    epochs: int = 4
    minibatch: int = 64
    hidden: tuple[int, ...] = (256, 128, 64)
    normalize_advantages: bool = False
    # fixed multiplier on the critic's linear output, so values of order
    # r / (1 - gamma) are reachable at the critic's step size
    value_scale: float = 1.0
    # "symexp" reads the critic output f as sign(f)(exp|f| - 1): one network
    # then covers returns from tens to hundreds of thousands
    value_transform: str = "linear"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.actor_lr < 0 or self.critic_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if not self.value_scale > 0:
            raise ValueError("value_scale must be positive")
        if self.value_transform not in VALUE_TRANSFORMS:
            raise ValueError(f"value_transform must be one of {VALUE_TRANSFORMS}")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @property
    def value_head(self) -> "ValueHead":
        return ValueHead(self.value_scale, self.value_transform)


VALUE_TRANSFORMS = ("linear", "symexp")


@dataclass(frozen=True)
class ValueHead:
    """Maps the critic's raw output f to a value estimate."""
    scale: float = 1.0
    transform: str = "linear"

    def __call__(self, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and their derivative with respect to f."""
        if self.transform == "symexp":
            e = np.exp(np.minimum(np.abs(f), 700.0))
            return self.scale * np.sign(f) * (e - 1.0), self.scale * e
        return self.scale * f, np.full_like(f, self.scale)


def _head(head) -> ValueHead:
    return head if isinstance(head, ValueHead) else ValueHead(float(head))


@dataclass
class Transition:
    state: np.ndarray
    action: int
    old_log_prob: float
    reward: float
    next_state: np.ndarray
    terminal: bool
    mask: np.ndarray
    dt: float


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray      # 0-based action index
    old_log_probs: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, trs: Sequence[Transition]) -> "Batch":
        if not trs:
            raise ValueError("empty transition buffer")
        return cls(
            np.array([t.state for t in trs], dtype=float),
            np.array([t.action - 1 for t in trs], dtype=np.int64),
            np.array([t.old_log_prob for t in trs], dtype=float),
            np.array([t.reward for t in trs], dtype=float),
            np.array([t.next_state for t in trs], dtype=float),
            np.array([t.terminal for t in trs], dtype=bool),
            np.array([t.mask for t in trs], dtype=bool),
        )

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.states[idx], self.actions[idx], self.old_log_probs[idx],
                     self.rewards[idx], self.next_states[idx], self.terminals[idx],
                     self.masks[idx])


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ContractViolation("every row of the action mask needs a feasible action")
    z = np.where(mask, logits, MASK_LOGIT)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    return z - lse


def masked_policy(actor: Mlp, state: np.ndarray, mask: np.ndarray):
    """Action probabilities and log-probabilities with infeasible logits overwritten."""
    logits = actor.forward(np.atleast_2d(state) * OBS_SCALE)
    logp = masked_log_softmax(logits, np.atleast_2d(mask))
    probs = np.exp(logp)
    if np.ndim(state) == 1:
        return probs[0], logp[0]
    return probs, logp


def importance_ratio(new_log_prob, old_log_prob):
    return np.exp(np.asarray(new_log_prob) - np.asarray(old_log_prob))


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; returns an ActionId in 1..8."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    # side="right" skips zero-mass entries, whose cdf equals their predecessor's
    k = int(np.searchsorted(cdf, u, side="right"))
    return min(k, len(probs) - 1) + 1


def values(critic: Mlp, states: np.ndarray, head: ValueHead | float = 1.0) -> np.ndarray:
    return _head(head)(critic.forward(np.atleast_2d(states) * OBS_SCALE)[:, 0])[0]


def advantage(tr: Transition, critic: Mlp, gamma: float, head: ValueHead | float = 1.0) -> float:
    if tr.terminal:
        return float(tr.reward)
    v = values(critic, np.stack([tr.state, tr.next_state]), head)
    return float(tr.reward + gamma * v[1] - v[0])


def critic_targets(batch: Batch, critic: Mlp, gamma: float, head: ValueHead | float = 1.0) -> np.ndarray:
    """Bootstrapped targets r + gamma V(s'), with V(s') evaluated now and held constant."""
    v_next = values(critic, batch.next_states, head)
    return batch.rewards + np.where(batch.terminals, 0.0, gamma * v_next)


def advantages_and_targets(batch: Batch, critic: Mlp, gamma: float, head: ValueHead | float = 1.0):
    v = values(critic, batch.states, head)
    v_next = values(critic, batch.next_states, head)
    boot = np.where(batch.terminals, 0.0, gamma * v_next)
    targets = batch.rewards + boot
    adv = np.where(batch.terminals, batch.rewards, targets - v)
    return adv, targets


def actor_loss(actor: Mlp, batch: Batch, adv: np.ndarray, clip_eps: float,
               entropy_coef: float):
    """Clipped surrogate minus entropy bonus; returns (loss, flat gradient, info)."""
    n = len(batch)
    logits, acts = actor.forward(batch.states * OBS_SCALE, keep=True)
    logp = masked_log_softmax(logits, batch.masks)
    p = np.exp(logp)
    rows = np.arange(n)
    lp_a = logp[rows, batch.actions]
    ratio = np.exp(lp_a - batch.old_log_probs)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    clipped = surr2 < surr1
    obj = np.where(clipped, surr2, surr1)
    plogp = np.where(batch.masks, p * logp, 0.0)
    ent = -plogp.sum(axis=1)
    loss = -obj.mean() - entropy_coef * ent.mean()

    onehot = np.zeros_like(p)
    onehot[rows, batch.actions] = 1.0
    coef = np.where(clipped, 0.0, adv * ratio)
    g_pg = -(coef[:, None] * (onehot - p))
    logp_safe = np.where(batch.masks, logp, 0.0)
    g_ent = p * (logp_safe + ent[:, None])    # d(-H)/dz
    g_logits = (g_pg + entropy_coef * g_ent) / n
    g_logits = np.where(batch.masks, g_logits, 0.0)
    grad = actor.backward(acts, g_logits)
    info = {"entropy": float(ent.mean()), "clip_fraction": float(clipped.mean()),
            "policy_loss": float(-obj.mean())}
    return float(loss), grad, info


def critic_loss(critic: Mlp, states: np.ndarray, targets: np.ndarray, head: ValueHead | float = 1.0):
    """Mean squared error against constant targets; returns (loss, flat gradient)."""
    out, acts = critic.forward(np.atleast_2d(states) * OBS_SCALE, keep=True)
    v, dv = _head(head)(out[:, 0])
    err = targets - v
    loss = float(np.mean(err * err))
    g = (-2.0 * dv * err / len(err))[:, None]
    return loss, critic.backward(acts, g)


class ActorCritic:
    """Actor and critic networks plus their optimiser state."""

    def __init__(self, config: PpoConfig | None = None, seed: int = 0, state_dim: int = STATE_DIM,
                 n_actions: int = N_ACTIONS):
        self.config = config or PpoConfig()
        rng = np.random.default_rng(seed)
        h = self.config.hidden
        self.actor = Mlp((state_dim, *h, n_actions), rng, out_gain=0.01)
        self.critic = Mlp((state_dim, *h, 1), rng, out_gain=1.0)
        self.actor_opt = AdamState.like(self.actor.params)
        self.critic_opt = AdamState.like(self.critic.params)
        self.version = 0

    def policy(self, state: np.ndarray, mask: np.ndarray):
        return masked_policy(self.actor, state, mask)

    def act(self, state, mask, rng: np.random.Generator | None = None, greedy: bool = False):
        probs, logp = self.policy(state, mask)
        if greedy or rng is None:
            a = int(np.argmax(np.where(mask, probs, -1.0))) + 1
        else:
            a = sample_action(probs, rng)
        return a, float(logp[a - 1])

    def update(self, transitions: Sequence[Transition], rng: np.random.Generator) -> dict:
        if not transitions:
            raise ValueError("cannot update from an empty buffer")
        cfg = self.config
        batch = Batch.from_transitions(transitions)
        adv, _ = advantages_and_targets(batch, self.critic, cfg.gamma, cfg.value_head)
        if cfg.normalize_advantages and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        n = len(batch)
        stats = {"actor_loss": [], "critic_loss": [], "entropy": [], "clip_fraction": []}
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = order[start:start + cfg.minibatch]
                mb = batch.take(idx)
                a_loss, a_grad, info = actor_loss(self.actor, mb, adv[idx], cfg.clip_eps,
                                                  cfg.entropy_coef)
                self.actor_opt.step(self.actor.params, a_grad, cfg.actor_lr)
                # the bootstrap uses the critic as it stands, so value information
                # travels more than one decision per update
                y = critic_targets(mb, self.critic, cfg.gamma, cfg.value_head)
                c_loss, c_grad = critic_loss(self.critic, mb.states, y, cfg.value_head)
                self.critic_opt.step(self.critic.params, c_grad, cfg.critic_lr)
                stats["actor_loss"].append(a_loss)
                stats["critic_loss"].append(c_loss)
                stats["entropy"].append(info["entropy"])
                stats["clip_fraction"].append(info["clip_fraction"])
        self.version += 1
        out = {k: float(np.mean(v)) for k, v in stats.items()}
        out["mean_reward"] = float(batch.rewards.mean())
        out["n_transitions"] = n
        return out

    # --------------------------------------------------------------- params
    def flat_params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.actor.params.copy(), self.critic.params.copy()

    def load_params(self, actor: np.ndarray, critic: np.ndarray, version: int | None = None) -> None:
        self.actor.set_params(actor)
        self.critic.set_params(critic)
        if version is not None:
            self.version = version


CHECKPOINT_MAGIC = b"RLCK"
CHECKPOINT_FORMAT = 1


def save_checkpoint(agent: ActorCritic, path) -> None:
    """Header (magic, format, version, layer sizes) followed by float64 LE parameters."""
    path = Path(path)
    head = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_FORMAT, agent.version)]
    for net in (agent.actor, agent.critic):
        head.append(struct.pack("<I", len(net.sizes)))
        head.append(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
    body = np.concatenate([agent.actor.params, agent.critic.params]).astype("<f8").tobytes()
    head.append(struct.pack("<Q", agent.actor.n_params + agent.critic.n_params))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(head))
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[int, tuple[int, ...], tuple[int, ...], np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    try:
        fmt, version = struct.unpack_from("<IQ", data, 4)
        if fmt != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unsupported checkpoint format {fmt}")
        off = 16
        sizes = []
        for _ in range(2):
            (k,) = struct.unpack_from("<I", data, off)
            off += 4
            sizes.append(tuple(struct.unpack_from(f"<{k}I", data, off)))
            off += 4 * k
        (total,) = struct.unpack_from("<Q", data, off)
        off += 8
        n_actor, n_critic = Mlp(sizes[0]).n_params, Mlp(sizes[1]).n_params
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or malformed header ({exc})") from None
    if n_actor + n_critic != total:
        raise CheckpointError(f"{path}: parameter count does not match layer sizes")
    if len(data) - off != 8 * total:
        raise CheckpointError(f"{path}: expected {total} parameters, file holds {(len(data) - off) / 8:g}")
    flat = np.frombuffer(data, dtype="<f8", count=total, offset=off).astype(float)
    return version, sizes[0], sizes[1], flat[:n_actor], flat[n_actor:]


def load_checkpoint(path, config: PpoConfig | None = None) -> ActorCritic:
    version, a_sizes, c_sizes, a_par, c_par = read_checkpoint(path)
    config = config or PpoConfig(hidden=a_sizes[1:-1])
    agent = ActorCritic(config, state_dim=a_sizes[0], n_actions=a_sizes[-1])
    if agent.actor.sizes != a_sizes or agent.critic.sizes != c_sizes:
        raise CheckpointError(
            f"checkpoint architecture {a_sizes}/{c_sizes} does not match "
            f"configured {agent.actor.sizes}/{agent.critic.sizes}")
    agent.load_params(a_par, c_par, version)
    return agent


def append_metrics(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")
