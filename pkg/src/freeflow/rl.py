"""DQN speed modulation over super-segments.

The agent observes five features per super-segment every control
interval, picks one speed ceiling per segment from a small discrete set,
and is rewarded for speed unless the segment is past the critical
density. The Q-network is a plain numpy MLP with a factored N x |A| head,
trained with hand-written backprop and Adam.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .control import Controller
from .dynamics import KMH, Simulation
from .network import RoadNetwork, ScenarioConfig, build_network
from .parallel import parallel_map

FEATURES = ("rho", "v", "gap", "lambda", "mu")
FEATURE_SCALES = (1.0, 1.0 / 60.0, 1.0 / 1000.0, 1.0, 1.0)
ACTION_SETS = {"src": (30.0, 45.0, 60.0), "src-tl": (20.0, 40.0, 60.0)}
POLICY_FORMAT = "freeflow-dqn-policy"
POLICY_VERSION = 1


class PolicyMismatch(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RewardParams:
    rho_star: float = 0.3
    alpha_d: float = 1000.0
    beta_v: float = 1.0
    gamma: float = 0.9

    def check(self, actions) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma {self.gamma} outside [0, 1]")
        if self.alpha_d <= self.beta_v * max(actions):
            raise ValueError(f"alpha_d {self.alpha_d:g} must exceed beta_v * max action "
                             f"{self.beta_v * max(actions):g}")


@dataclass
class DQNConfig:
    hidden: tuple[int, ...] = (128, 128)
    batch: int = 64
    lr: float = 1e-3
    buffer: int = 100_000
    eps_start: float = 0.9
    eps_min: float = 0.1
    eps_decay: float = 0.035
    reward: RewardParams = field(default_factory=RewardParams)

    def epsilon(self, episode: int) -> float:
        return max(self.eps_min, self.eps_start - self.eps_decay * episode)


# ---------------------------------------------------------------------------
# observation and reward
# ---------------------------------------------------------------------------

class SegmentIndex:
    """Per super-segment link indices and their start offsets along the segment."""

    def __init__(self, net: RoadNetwork):
        self.links = []
        self.offsets = []
        self.lengths = []
        for seg in net.super_segments:
            lis = [net.link_index[l] for l in seg.links]
            lens = [net.links[i].length for i in lis]
            self.links.append(lis)
            self.offsets.append(np.concatenate(([0.0], np.cumsum(lens)[:-1])))
            self.lengths.append(float(seg.length))

    @property
    def n(self) -> int:
        return len(self.links)


def observe(sim: Simulation, segs: SegmentIndex, prev_in, prev_out, elapsed: float) -> np.ndarray:
    """(N, 5) raw features: occupancy, mean speed km/h, mean net gap m, inflow, outflow veh/s."""
    out = np.zeros((segs.n, 5))
    cc0 = sim.params.CC0
    for i, (lis, offs, L) in enumerate(zip(segs.links, segs.offsets, segs.lengths)):
        ids = [sim.vehicles_on(li) for li in lis]
        # vehicles ordered front first: later links first, each link head first
        ids_all = np.concatenate(ids[::-1]) if ids else np.zeros(0, dtype=np.int64)
        x = np.concatenate([sim.pos[a] + o for a, o in zip(ids[::-1], offs[::-1])]) \
            if ids_all.shape[0] else np.zeros(0)
        ln = sim.length[ids_all]
        rho = min(float((ln + cc0).sum() / L), 1.0)
        if ids_all.shape[0]:
            v = float(sim.speed[ids_all].mean() / KMH)
        else:
            v = float(min(sim.limit_ms[lis[0]], sim.cmd_ms[lis[0]]) / KMH)
        gap = float(np.mean(x[:-1] - ln[:-1] - x[1:])) if ids_all.shape[0] >= 2 else L
        out[i] = (rho, v, gap, 0.0, 0.0)
    if elapsed > 0:
        out[:, 3] = (sim.seg_in - prev_in) / elapsed
        out[:, 4] = (sim.seg_out - prev_out) / elapsed
    return out


def reward(obs, p: RewardParams = RewardParams()) -> tuple[np.ndarray, float]:
    obs = np.asarray(obs, dtype=float).reshape(-1, 5)
    r = np.where(obs[:, 0] > p.rho_star, -p.alpha_d, 0.0) + p.beta_v * obs[:, 1]
    return r, float(r.sum())


# ---------------------------------------------------------------------------
# Q-network
# ---------------------------------------------------------------------------

class QNetwork:
    """MLP from ``n_in`` inputs to an (n_seg, n_act) table of Q-values."""

    def __init__(self, n_in: int, n_seg: int, n_act: int, hidden=(128, 128), seed: int = 0,
                 input_scale=None):
        self.n_in, self.n_seg, self.n_act = int(n_in), int(n_seg), int(n_act)
        self.hidden = tuple(int(h) for h in hidden)
        self.input_scale = (np.ones(self.n_in) if input_scale is None
                            else np.asarray(input_scale, dtype=float))
        if self.input_scale.shape != (self.n_in,):
            raise ValueError(f"input scale length {self.input_scale.shape[0]} != input width {n_in}")
        rng = np.random.default_rng(seed)
        sizes = (self.n_in, *self.hidden, self.n_seg * self.n_act)
        self.params = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.params.append(rng.normal(0.0, math.sqrt(2.0 / a), (a, b)))
            self.params.append(np.zeros(b))
        self.target = [w.copy() for w in self.params]
        self._m = [np.zeros_like(w) for w in self.params]
        self._v = [np.zeros_like(w) for w in self.params]
        self._t = 0

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.params)

    def refresh_target(self) -> None:
        self.target = [w.copy() for w in self.params]

    def _forward(self, x, params):
        acts = [x]
        h = x
        n_layers = len(params) // 2
        for k in range(n_layers):
            h = h @ params[2 * k] + params[2 * k + 1]
            if k < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def _inputs(self, obs) -> np.ndarray:
        x = np.atleast_2d(np.asarray(obs, dtype=float))
        if x.shape[1] != self.n_in:
            raise PolicyMismatch(f"observation width {x.shape[1]} != network input width {self.n_in}")
        return x * self.input_scale

    def q(self, obs, target: bool = False) -> np.ndarray:
        """Q-values with shape (batch, n_seg, n_act)."""
        x = self._inputs(obs)
        out = self._forward(x, self.target if target else self.params)[-1]
        return out.reshape(x.shape[0], self.n_seg, self.n_act)

    def loss_and_grad(self, obs, act, rew, obs2, done, gamma: float):
        x = self._inputs(obs)
        acts = self._forward(x, self.params)
        q = acts[-1].reshape(x.shape[0], self.n_seg, self.n_act)
        y = td_targets(self, rew, obs2, done, gamma)
        b = np.arange(x.shape[0])[:, None]
        s = np.arange(self.n_seg)[None, :]
        err = y - q[b, s, act]
        loss = float(np.mean(np.sum(err ** 2, axis=1)))
        dq = np.zeros_like(q)
        dq[b, s, act] = -2.0 * err / x.shape[0]
        grads = [None] * len(self.params)
        delta = dq.reshape(x.shape[0], -1)
        n_layers = len(self.params) // 2
        for k in range(n_layers - 1, -1, -1):
            grads[2 * k] = acts[k].T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            if k:
                delta = (delta @ self.params[2 * k].T) * (acts[k] > 0.0)
        return loss, grads

    def adam_step(self, grads, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self._t += 1
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for w, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def q_forward(net: QNetwork, obs) -> np.ndarray:
    """Q table (n_seg, n_act) for a single observation."""
    return net.q(np.ravel(obs))[0]


def td_targets(net: QNetwork, rew, obs2, done, gamma: float) -> np.ndarray:
    rew = np.asarray(rew, dtype=float).reshape(-1, net.n_seg)
    boot = net.q(obs2, target=True).max(axis=2)
    alive = 1.0 - np.asarray(done, dtype=float).reshape(-1, 1)
    return rew + gamma * alive * boot


def td_loss(net: QNetwork, batch, gamma: float) -> float:
    return net.loss_and_grad(*batch, gamma)[0]


def td_update(net: QNetwork, batch, p: RewardParams, lr: float) -> float:
    """One Adam step on the summed per-segment squared TD error; returns the pre-step loss."""
    obs, act, rew, obs2, done = batch
    if len(obs) == 0:
        raise ValueError("td_update needs a nonempty batch")
    loss, grads = net.loss_and_grad(obs, np.asarray(act, dtype=np.int64), rew, obs2, done, p.gamma)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged(f"non-finite TD loss {loss!r}")
    net.adam_step(grads, lr)
    return loss


def select_actions(q, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Per-segment epsilon-greedy action indices; greedy ties go to the lowest index."""
    q = np.asarray(q, dtype=float)
    greedy = np.argmax(q, axis=1)
    if eps <= 0.0:
        return greedy
    explore = rng.random(q.shape[0]) < eps
    rand = rng.integers(0, q.shape[1], size=q.shape[0])
    return np.where(explore, rand, greedy)


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions in preallocated arrays."""

    def __init__(self, capacity: int, obs_dim: int, n_seg: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.obs2 = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, n_seg), dtype=np.int64)
        self.rew = np.zeros((capacity, n_seg))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.next = 0
        self.pushed = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, act, rew, obs2, done) -> None:
        i = self.next
        self.obs[i] = np.ravel(obs)
        self.act[i] = act
        self.rew[i] = rew
        self.obs2[i] = np.ravel(obs2)
        self.done[i] = done
        self.next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def oldest(self) -> int:
        """Sequence number of the oldest stored transition."""
        return self.pushed - self.size

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=min(n, self.size))
        return self.obs[idx], self.act[idx], self.rew[idx], self.obs2[idx], self.done[idx]


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------

class TrafficEnv:
    """Simulator wrapped as an episodic MDP with one step per control interval."""

    def __init__(self, cfg: ScenarioConfig, actions, reward_params: RewardParams | None = None):
        self.cfg = cfg
        self.net = build_network(cfg)
        self.segs = SegmentIndex(self.net)
        self.actions = tuple(float(a) for a in actions)
        self.p = reward_params or RewardParams()
        self.n_seg = self.segs.n
        self.obs_dim = 5 * self.n_seg
        self.input_scale = np.tile(FEATURE_SCALES, self.n_seg)
        self.interval = cfg.sim.control_interval_s
        self.sim: Simulation | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.sim = Simulation(self.net, seed=seed)
        self._mark()
        return observe(self.sim, self.segs, self._in, self._out, 0.0).ravel()

    def _mark(self):
        self._in = self.sim.seg_in.copy()
        self._out = self.sim.seg_out.copy()
        self._t = self.sim.clock

    def step(self, action_idx):
        sim = self.sim
        speeds = segment_speeds(self.net, [self.actions[a] for a in action_idx])
        sim.set_link_speeds(speeds)
        end = min(sim.clock + self.interval, self.cfg.sim.duration_s)
        sim.run(end)
        obs = observe(sim, self.segs, self._in, self._out, sim.clock - self._t)
        self._mark()
        r, _ = reward(obs, self.p)
        done = sim.clock >= self.cfg.sim.duration_s - 1e-9
        return obs.ravel(), r, done, done


class ToyEnv:
    """One segment whose speed follows the chosen ceiling and never reaches the critical density.

    Reward is beta_v times the resulting speed, so the optimal greedy
    action is the largest speed in every state.
    """

    def __init__(self, actions=(30.0, 45.0, 60.0), horizon: int = 100,
                 reward_params: RewardParams | None = None):
        self.actions = tuple(float(a) for a in actions)
        self.horizon = horizon
        self.p = reward_params or RewardParams()
        self.n_seg = 1
        self.obs_dim = 5
        self.input_scale = np.array(FEATURE_SCALES)

    def _draw(self, v):
        rng = self.rng
        rho = rng.uniform(0.0, 0.25)
        return np.array([rho, v, rng.uniform(20.0, 1000.0), rng.uniform(0.0, 0.6), rng.uniform(0.0, 0.6)])

    def reset(self, seed: int) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        return self._draw(self.rng.choice(self.actions))

    def step(self, action_idx):
        self.t += 1
        obs = self._draw(self.actions[int(action_idx[0])])
        r, _ = reward(obs, self.p)
        # the horizon is a time limit, not a terminal state
        return obs, r, False, self.t >= self.horizon


def segment_speeds(net: RoadNetwork, speeds) -> dict[int, float]:
    """Expand one speed per super-segment to a per-link command map."""
    out = {}
    for seg, v in zip(net.super_segments, speeds):
        for lid in seg.links:
            out[net.link_index[lid]] = float(v)
    return out


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

@dataclass
class Policy:
    net: QNetwork
    actions: tuple[float, ...]
    regime: str = "src"
    meta: dict = field(default_factory=dict)

    @property
    def n_seg(self) -> int:
        return self.net.n_seg

    def greedy(self, obs) -> np.ndarray:
        return np.argmax(q_forward(self.net, obs), axis=1)

    def check(self, n_seg: int, actions=None) -> None:
        if n_seg != self.n_seg:
            raise PolicyMismatch(
                f"policy expects N={self.n_seg} super-segments (input width {5 * self.n_seg}) "
                f"but scenario has N={n_seg} (input width {5 * n_seg})")
        if actions is not None and tuple(float(a) for a in actions) != self.actions:
            raise PolicyMismatch(f"policy action set {list(self.actions)} does not match "
                                 f"configured {list(actions)}")


def save_policy(policy: Policy, path) -> Path:
    net = policy.net
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "N": net.n_seg,
        "actions": list(policy.actions),
        "features": list(FEATURES),
        "feature_scales": list(FEATURE_SCALES),
        "input_width": net.n_in,
        "hidden": list(net.hidden),
        "regime": policy.regime,
        "meta": policy.meta,
        "weights": [w.tolist() for w in net.params],
    }
    path = Path(path)
    path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return path


def load_policy(path) -> Policy:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != POLICY_FORMAT:
        raise ValueError(f"{path}: not a policy file")
    if doc.get("version") != POLICY_VERSION:
        raise ValueError(f"{path}: unsupported policy version {doc.get('version')}")
    if list(doc["feature_scales"]) != list(FEATURE_SCALES):
        raise PolicyMismatch(f"{path}: feature scales {doc['feature_scales']} differ from {list(FEATURE_SCALES)}")
    n, actions = int(doc["N"]), tuple(float(a) for a in doc["actions"])
    net = QNetwork(doc["input_width"], n, len(actions), doc["hidden"],
                   input_scale=np.tile(FEATURE_SCALES, n))
    if len(doc["weights"]) != len(net.params):
        raise ValueError(f"{path}: expected {len(net.params)} weight arrays, found {len(doc['weights'])}")
    weights = [np.asarray(w, dtype=float).reshape(p.shape) for w, p in zip(doc["weights"], net.params)]
    net.params = weights
    net.refresh_target()
    return Policy(net, actions, doc.get("regime", "src"), doc.get("meta", {}))


class PolicyController(Controller):
    """Greedy rollout of a trained policy as a simulation controller."""

    kind = "dqn"

    def __init__(self, policy: Policy, actions=None):
        self.policy = policy
        self.actions = actions
        self.log: list[dict] = []

    def reset(self, sim):
        self.segs = SegmentIndex(sim.network)
        self.policy.check(self.segs.n, self.actions)
        self._in = sim.seg_in.copy()
        self._out = sim.seg_out.copy()
        self._t = sim.clock
        self.log = []

    def control(self, sim):
        obs = observe(sim, self.segs, self._in, self._out, sim.clock - self._t)
        self._in = sim.seg_in.copy()
        self._out = sim.seg_out.copy()
        self._t = sim.clock
        speeds = [self.policy.actions[a] for a in self.policy.greedy(obs.ravel())]
        self.log.append({"t": sim.clock, "speeds": speeds})
        return segment_speeds(sim.network, speeds)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

REGIMES = {
    # regime -> (action set, episode length s)
    "src": (ACTION_SETS["src"], 2500.0),
    "src-tl": (ACTION_SETS["src-tl"], 1200.0),
}


def run_dqn(env, episodes: int, seed: int, cfg: DQNConfig | None = None, net: QNetwork | None = None,
            episode_seed=None, on_episode=None):
    """Generic DQN loop over an env with reset(seed) / step(action indices).

    ``env.step`` returns (next obs, per-segment rewards, terminal, episode over).

    Returns the trained network and the per-update loss history.
    """
    cfg = cfg or DQNConfig()
    cfg.reward.check(env.actions)
    rng = np.random.default_rng(seed)
    if net is None:
        net = QNetwork(env.obs_dim, env.n_seg, len(env.actions), cfg.hidden, seed=seed,
                       input_scale=env.input_scale)
    buf = ReplayBuffer(cfg.buffer, env.obs_dim, env.n_seg)
    losses: list[float] = []
    episode_seed = episode_seed or (lambda ep: seed * 100_003 + ep)
    for ep in range(episodes):
        net.refresh_target()
        eps = cfg.epsilon(ep)
        obs = env.reset(episode_seed(ep))
        over = False
        ep_return = 0.0
        while not over:
            a = select_actions(q_forward(net, obs), eps, rng)
            obs2, r, terminal, over = env.step(a)
            buf.push(obs, a, r, obs2, terminal)
            ep_return += float(np.sum(r))
            try:
                losses.append(td_update(net, buf.sample(cfg.batch, rng), cfg.reward, cfg.lr))
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"episode {ep}, update {len(losses)}: {exc}; "
                                       f"recent losses {losses[-5:]}") from None
            obs = obs2
        if on_episode is not None:
            on_episode(ep, eps, ep_return, losses)
    return net, losses


def train(scenario: ScenarioConfig, regime: str = "src", episodes: int = 60, seed: int = 0,
          cfg: DQNConfig | None = None, on_episode=None) -> Policy:
    """Train a speed-modulation policy on ``scenario`` under the SRC or SRC-TL regime."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {sorted(REGIMES)}")
    cfg = cfg or DQNConfig()
    actions, horizon = REGIMES[regime]
    scenario = scenario.with_sim(duration_s=horizon)
    env = TrafficEnv(scenario, actions, cfg.reward)
    steps = int(math.ceil(horizon / scenario.sim.control_interval_s))
    history = []

    def log(ep, eps, ret, losses):
        history.append({"episode": ep, "epsilon": eps, "return": ret,
                        "loss": float(np.mean(losses[-steps:])) if losses else None})
        if on_episode is not None:
            on_episode(history[-1])

    net, _ = run_dqn(env, episodes, seed, cfg, on_episode=log)
    meta = {"episodes": episodes, "seed": seed, "scenario": scenario.name, "history": history,
            "config": asdict(cfg)}
    return Policy(net, actions, regime, meta)


def _eval_one(args):
    cfg, policy, seed = args
    from .control import NoControl

    ctrl = NoControl() if policy is None else PolicyController(policy)
    sim = Simulation(build_network(cfg), seed=seed, controller=ctrl)
    sim.run()
    return sim.report()


def evaluate(policy: Policy | None, scenario: ScenarioConfig, seeds, jobs: int | None = None):
    """Greedy rollouts, one report per seed; ``policy=None`` runs without control."""
    if policy is not None:
        policy.check(len(build_network(scenario).super_segments))
    return parallel_map(_eval_one, [(scenario, policy, int(s)) for s in seeds], jobs)
