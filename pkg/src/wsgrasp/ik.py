"""Model-free fingertip inverse kinematics with soft actor-critic.

Targets live in the end-effector (gripper base) frame, so a trained policy
does not depend on where the arm holds the gripper. One environment step
applies an absolute, normalized actuator command; an episode is a rollout of
up to `max_steps` such steps toward one static target set.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import DomainError, NumericError, SingularityError, UsageError
from .geom3d import RigidTransform, rotation_about
from .grippers import GripperModel, forward_kinematics
from .nn import Adam, Sequential, load_checkpoint, mlp, save_checkpoint
from .workspace import sample_workspace

log = logging.getLogger(__name__)

__all__ = [
    "to_ee_frame",
    "reward",
    "ActionSpace",
    "TargetSampler",
    "IkEnv",
    "SacConfig",
    "ReplayBuffer",
    "SacAgent",
    "sac_train",
    "evaluate_policy",
    "ik_oracle",
    "save_agent",
    "load_agent",
]

SINGULAR_PENALTY = 0.01


def to_ee_frame(ee_pose: RigidTransform, targets) -> np.ndarray:
    """World points -> end-effector frame, given the end-effector pose in the world."""
    return ee_pose.inverse().apply(np.asarray(targets, dtype=float).reshape(-1, 3))


def reward(tips, targets) -> float:
    """Negative sum of squared fingertip errors (m^2)."""
    a = np.asarray(tips, dtype=float)
    b = np.asarray(targets, dtype=float)
    if a.shape != b.shape:
        raise DomainError(f"fingertip array {a.shape} does not match targets {b.shape}")
    return -float(np.sum((a - b) ** 2))


# ---------------------------------------------------------------- environment

@dataclass(frozen=True)
class ActionSpace:
    """Actuators plus the optional arm roll about the base z axis."""
    gripper: GripperModel

    @property
    def dim(self) -> int:
        return self.gripper.n_actuators + (self.gripper.arm_roll is not None)

    @property
    def lower(self) -> np.ndarray:
        lo = self.gripper.lower
        return np.r_[lo, self.gripper.arm_roll[0]] if self.gripper.arm_roll else lo

    @property
    def upper(self) -> np.ndarray:
        hi = self.gripper.upper
        return np.r_[hi, self.gripper.arm_roll[1]] if self.gripper.arm_roll else hi

    def denormalize(self, a) -> np.ndarray:
        a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
        return self.lower + 0.5 * (a + 1.0) * (self.upper - self.lower)

    def normalize(self, joints) -> np.ndarray:
        span = self.upper - self.lower
        return 2.0 * (np.asarray(joints, dtype=float) - self.lower) / np.where(span > 0, span, 1.0) - 1.0

    def fingertips(self, joints) -> np.ndarray:
        """Fingertips in the end-effector frame; raises SingularityError."""
        joints = np.asarray(joints, dtype=float)
        A = self.gripper.n_actuators
        tips, sol = forward_kinematics(self.gripper, joints[:A], return_palm=True)
        if sol is not None and sol.near_singular:
            raise SingularityError(f"{self.gripper.name}: near-singular palm")
        if self.gripper.arm_roll is not None:
            tips = tips @ rotation_about((0, 0, 1), joints[A]).T
        return tips


class TargetSampler:
    """Reachable target sets: workspace rows, rotated by a random arm roll."""

    def __init__(self, gripper: GripperModel, L: int = 4096, seed: int = 0):
        self.space = ActionSpace(gripper)
        self.ws = sample_workspace(gripper, L, seed)
        pts = self.ws.points()
        self.center = pts.mean(axis=0)
        if gripper.arm_roll is not None:
            self.center = np.array([0.0, 0.0, self.center[2]])
        self.scale = float(np.max(np.linalg.norm(pts - self.center, axis=1))) or 1.0

    def draw(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """(targets N x 3, generating joints incl. roll)."""
        row = int(rng.integers(self.ws.L))
        q = self.ws.configs[row]
        tips = self.ws.S[row].reshape(-1, 3)
        g = self.space.gripper
        if g.arm_roll is not None:
            roll = rng.uniform(*g.arm_roll)
            tips = tips @ rotation_about((0, 0, 1), roll).T
            q = np.r_[q, roll]
        return tips, q


class IkEnv:
    """Static-target reaching environment in the end-effector frame."""

    def __init__(self, gripper: GripperModel, sampler: TargetSampler | None = None, max_steps: int = 100,
                 success_tol: float = 1e-3, d: float = 0.15, seed: int = 0):
        self.gripper = gripper
        self.space = ActionSpace(gripper)
        self.sampler = sampler or TargetSampler(gripper, seed=seed)
        self.max_steps = max_steps
        self.success_tol = success_tol
        self.d = d
        self.rng = np.random.default_rng(seed)
        self.target: np.ndarray | None = None
        self.joints: np.ndarray | None = None
        self.tips: np.ndarray | None = None
        self.steps = 0

    @property
    def obs_dim(self) -> int:
        return self.space.dim + 3 * self.gripper.n_fingers

    def observe(self) -> np.ndarray:
        t = (self.target - self.sampler.center) / self.sampler.scale
        return np.r_[self.space.normalize(self.joints), t.ravel()]

    def reset(self, target=None, joints=None) -> np.ndarray:
        if target is None:
            target, _ = self.sampler.draw(self.rng)
        target = np.asarray(target, dtype=float).reshape(-1, 3)
        if target.shape != (self.gripper.n_fingers, 3):
            raise DomainError(f"expected {self.gripper.n_fingers} targets")
        self.target = target
        if joints is None:
            joints = self._start_joints()
        self.joints = np.asarray(joints, dtype=float)
        self.tips = self.space.fingertips(self.joints)
        self.steps = 0
        return self.observe()

    def _start_joints(self) -> np.ndarray:
        mid = 0.5 * (self.space.lower + self.space.upper)
        try:
            self.space.fingertips(mid)
            return mid
        except SingularityError:
            # the first workspace configuration is assemblable by construction
            q = self.sampler.ws.configs[0]
            return np.r_[q, 0.0] if self.gripper.arm_roll is not None else q.copy()

    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.tips - self.target, axis=1)

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        if self.target is None:
            raise UsageError("reset the environment before stepping")
        joints = self.space.denormalize(action)
        singular = False
        try:
            tips = self.space.fingertips(joints)
            self.joints, self.tips = joints, tips
            r = reward(tips, self.target)
        except SingularityError:
            singular = True
            r = reward(self.tips, self.target) - SINGULAR_PENALTY
        self.steps += 1
        err = self.errors()
        success = bool(err.max() < self.success_tol)
        done = success or self.steps >= self.max_steps
        return self.observe(), r, done, {"success": success, "singular": singular, "errors": err}


# ---------------------------------------------------------------- SAC

@dataclass
class SacConfig:
    hidden: int = 128
    alpha: float = 0.8
    lr: float = 0.003
    tau: float = 0.005
    gamma: float = 0.99
    buffer: int = 100_000
    batch: int = 256
    warmup: int = 1000
    reward_scale: float = 1e4
    updates_per_step: int = 1
    train_steps: int = 100
    her: int = 0
    log_std_min: float = -20.0
    log_std_max: float = 2.0


class ReplayBuffer:
    def __init__(self, capacity: int, s_dim: int, a_dim: int):
        if capacity < 1:
            raise DomainError("replay capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, s_dim))
        self.a = np.zeros((capacity, a_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, s_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.size == 0:
            raise UsageError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, rng: np.random.Generator, n: int):
        i = self.sample_indices(rng, n)
        return self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i]


LOG_2PI = math.log(2.0 * math.pi)
TANH_EPS = 1e-6


class SacAgent:
    """Squashed-Gaussian actor, twin critics and their Polyak targets.

    The agent state is the environment observation with the previous action
    appended.
    """

    def __init__(self, obs_dim: int, act_dim: int, config: SacConfig | None = None, seed: int = 0):
        self.cfg = config or SacConfig()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.s_dim = obs_dim + act_dim
        rng = np.random.default_rng(seed)
        h = self.cfg.hidden
        self.policy = mlp((self.s_dim, h, h, 2 * act_dim), rng, final_scale=0.1)
        self.q1 = mlp((self.s_dim + act_dim, h, h, 1), rng)
        self.q2 = mlp((self.s_dim + act_dim, h, h, 1), rng)
        self.q1_target = self.q1.clone()
        self.q2_target = self.q2.clone()
        self.opt_pi = Adam(self.policy.params, lr=self.cfg.lr)
        self.opt_q1 = Adam(self.q1.params, lr=self.cfg.lr)
        self.opt_q2 = Adam(self.q2.params, lr=self.cfg.lr)
        self.updates = 0

    def state(self, obs, prev_action) -> np.ndarray:
        return np.r_[obs, prev_action]

    def _heads(self, s):
        out, tape = self.policy.forward(np.atleast_2d(s))
        mu = out[:, :self.act_dim]
        raw_ls = out[:, self.act_dim:]
        ls = np.clip(raw_ls, self.cfg.log_std_min, self.cfg.log_std_max)
        return mu, ls, raw_ls, tape

    def mean_action(self, s) -> np.ndarray:
        mu, _, _, _ = self._heads(s)
        return np.tanh(mu)

    def sample(self, s, rng: np.random.Generator):
        """Squashed sample, its log-density and the pieces needed for gradients."""
        mu, ls, raw_ls, tape = self._heads(s)
        eps = rng.standard_normal(mu.shape)
        sigma = np.exp(ls)
        u = mu + sigma * eps
        a = np.tanh(u)
        logp = np.sum(-0.5 * eps ** 2 - ls - 0.5 * LOG_2PI - np.log(1.0 - a * a + TANH_EPS), axis=1)
        return a, logp, (mu, ls, raw_ls, tape, eps, sigma, a)

    def act(self, s, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        if deterministic or rng is None:
            return self.mean_action(s)[0]
        return self.sample(s, rng)[0][0]

    @staticmethod
    def _q(net: Sequential, s, a):
        return net.forward(np.hstack([s, a]))

    def update(self, batch, rng: np.random.Generator) -> dict[str, float]:
        cfg = self.cfg
        s, a, r, s2, done = batch
        B = len(s)
        r = cfg.reward_scale * r
        # critic targets
        a2, logp2, _ = self.sample(s2, rng)
        q_next = np.minimum(self.q1_target(np.hstack([s2, a2])), self.q2_target(np.hstack([s2, a2])))[:, 0]
        y = r + cfg.gamma * (1.0 - done) * (q_next - cfg.alpha * logp2)
        losses = {}
        for name, net, opt in (("q1", self.q1, self.opt_q1), ("q2", self.q2, self.opt_q2)):
            q, tape = self._q(net, s, a)
            diff = q[:, 0] - y
            losses[name] = float(np.mean(diff ** 2))
            _, grads = net.backward(tape, (2.0 / B) * diff[:, None])
            opt.step(grads)
        # actor
        a_new, logp, (mu, ls, raw_ls, tape, eps, sigma, a_sq) = self.sample(s, rng)
        x = np.hstack([s, a_new])
        q1, t1 = self.q1.forward(x)
        q2, t2 = self.q2.forward(x)
        use1 = (q1 <= q2)[:, 0]
        g_out = np.zeros((B, 1))
        g_out[:, 0] = 1.0
        dq1, _ = self.q1.backward(t1, g_out * use1[:, None])
        dq2, _ = self.q2.backward(t2, g_out * (~use1)[:, None])
        dq_da = (dq1 + dq2)[:, self.s_dim:]
        one_m = 1.0 - a_sq * a_sq
        g_u = cfg.alpha * 2.0 * a_sq * one_m / (one_m + TANH_EPS) - dq_da * one_m
        g_mu = g_u / B
        g_ls = (g_u * sigma * eps - cfg.alpha) / B
        g_ls = g_ls * ((raw_ls >= cfg.log_std_min) & (raw_ls <= cfg.log_std_max))
        _, pgrads = self.policy.backward(tape, np.hstack([g_mu, g_ls]))
        self.opt_pi.step(pgrads)
        q_min = np.minimum(q1, q2)[:, 0]
        losses["pi"] = float(np.mean(cfg.alpha * logp - q_min))
        self.soft_update()
        self.updates += 1
        for k, v in losses.items():
            if not np.isfinite(v):
                raise NumericError(f"SAC {k} loss is not finite after {self.updates} updates")
        return losses

    def soft_update(self) -> None:
        tau = self.cfg.tau
        for net, tgt in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p, t in zip(net.params, tgt.params):
                t *= 1.0 - tau
                t += tau * p


# ---------------------------------------------------------------- training

@dataclass
class SacRun:
    agent: SacAgent
    curve: list[float] = field(default_factory=list)
    episodes: int = 0


def rollout(agent: SacAgent, env: IkEnv, target, rng: np.random.Generator | None = None,
            deterministic: bool = True, max_steps: int | None = None, on_step=None) -> dict:
    """Run one episode; returns final errors, joints and the transition list.

    Each transition is (state, action, reward, next state, success, achieved tips).
    """
    obs = env.reset(target)
    prev = env.space.normalize(env.joints)
    limit = env.max_steps if max_steps is None else max_steps
    info = {"errors": env.errors(), "success": False}
    steps = []
    for _ in range(limit):
        s = agent.state(obs, prev)
        a = agent.act(s, rng, deterministic)
        obs2, r, done, info = env.step(a)
        steps.append((s, a, r, agent.state(obs2, a), info["success"], env.tips.copy(), info["singular"]))
        if on_step is not None:
            on_step(steps[-1])
        obs, prev = obs2, a
        if done:
            break
    return {"errors": env.errors(), "joints": env.joints.copy(), "success": info["success"],
            "steps": env.steps, "tips": env.tips.copy(), "transitions": steps}


def _relabel(env: IkEnv, state: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Swap the target slice of an agent state for another goal."""
    out = state.copy()
    A = env.space.dim
    out[A:A + goal.size] = ((goal - env.sampler.center) / env.sampler.scale).ravel()
    return out


def sac_train(env_factory, epochs: int, targets_per_epoch: int = 10, seed: int = 0,
              config: SacConfig | None = None, agent: SacAgent | None = None) -> SacRun:
    """Train on fresh workspace targets; curve = mean final per-finger error per epoch (m).

    With `config.her > 0`, every transition is also stored `her` times with
    the goal replaced by fingertips achieved at the same or a later step of
    the episode (hindsight relabeling); rewards are recomputed for the new goal.
    """
    cfg = config or SacConfig()
    env: IkEnv = env_factory()
    rng = np.random.default_rng(seed)
    agent = agent or SacAgent(env.obs_dim, env.space.dim, cfg, seed)
    buf = ReplayBuffer(cfg.buffer, agent.s_dim, agent.act_dim)
    run = SacRun(agent)

    def learn(tr):
        buf.add(*tr[:5])
        if len(buf) >= cfg.warmup:
            for _ in range(cfg.updates_per_step):
                agent.update(buf.sample(rng, cfg.batch), rng)

    for epoch in range(epochs):
        finals = []
        for _ in range(targets_per_epoch):
            target, _ = env.sampler.draw(rng)
            try:
                out = rollout(agent, env, target, rng, deterministic=False,
                              max_steps=min(cfg.train_steps, env.max_steps), on_step=learn)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}: {exc}") from None
            trs = out["transitions"]
            for t, (s, a, r, s2, _, tips, singular) in enumerate(trs):
                for _ in range(cfg.her):
                    goal = trs[int(rng.integers(t, len(trs)))][5]
                    err = np.linalg.norm(tips - goal, axis=1)
                    r2 = reward(tips, goal) - (SINGULAR_PENALTY if singular else 0.0)
                    buf.add(_relabel(env, s, goal), a, r2, _relabel(env, s2, goal),
                            bool(err.max() < env.success_tol))
            finals.append(float(out["errors"].mean()))
            run.episodes += 1
        run.curve.append(float(np.mean(finals)))
        if (epoch + 1) % 25 == 0:
            log.info("sac epoch %d mean final error %.4f m", epoch + 1, run.curve[-1])
    return run


def evaluate_policy(agent: SacAgent, env: IkEnv, targets) -> np.ndarray:
    """Deterministic rollouts; rows are per-finger final errors (m)."""
    return np.array([rollout(agent, env, t)["errors"] for t in targets])


# ---------------------------------------------------------------- oracle

def ik_oracle(gripper: GripperModel, targets, restarts: int = 32, seed: int = 0,
              stop: float = 1e-7, init=None) -> tuple[np.ndarray, float]:
    """Multi-start Nelder-Mead on the squared fingertip error.

    Returns the best joints (arm roll last, if any) and the max per-finger
    residual (m). Restarts stop early once the residual drops below `stop`.
    `init` (actuator values, roll optional) replaces the mid-range first start.
    """
    space = ActionSpace(gripper)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    if targets.shape[0] != gripper.n_fingers:
        raise DomainError(f"expected {gripper.n_fingers} targets")
    rng = np.random.default_rng(seed)

    def cost(x):
        try:
            return -reward(space.fingertips(space.denormalize(x)), targets) + 10.0 * np.sum(
                np.maximum(np.abs(x) - 1.0, 0.0) ** 2)
        except SingularityError:
            return 1.0 + float(np.sum(x * x))

    best_x, best_f = None, np.inf
    first = np.zeros(space.dim)
    if init is not None:
        init = np.asarray(init, dtype=float)
        full = np.r_[init, 0.0] if init.size == space.dim - 1 else init
        first = space.normalize(full)
    starts = [first] + [rng.uniform(-1, 1, space.dim) for _ in range(max(restarts - 1, 0))]
    for x0 in starts:
        res = minimize(cost, x0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-18, "maxiter": 4000 * space.dim})
        if res.fun < best_f:
            best_x, best_f = np.clip(res.x, -1, 1), res.fun
        q = space.denormalize(best_x)
        try:
            resid = float(np.max(np.linalg.norm(space.fingertips(q) - targets, axis=1)))
        except SingularityError:
            resid = np.inf
        if resid < stop:
            break
    q = space.denormalize(best_x)
    try:
        resid = float(np.max(np.linalg.norm(space.fingertips(q) - targets, axis=1)))
    except SingularityError:
        resid = math.inf
    return q, resid


# ---------------------------------------------------------------- checkpoints

def save_agent(path, agent: SacAgent, gripper: str, meta: dict[str, str] | None = None) -> None:
    m = {k: repr(v) for k, v in asdict(agent.cfg).items()}
    m.update({"gripper": gripper, "obs_dim": str(agent.obs_dim), "act_dim": str(agent.act_dim)})
    m.update(meta or {})
    save_checkpoint(path, {"policy": agent.policy, "q1": agent.q1, "q2": agent.q2,
                           "q1_target": agent.q1_target, "q2_target": agent.q2_target}, m)


def load_agent(path) -> tuple[SacAgent, dict[str, str]]:
    nets, meta = load_checkpoint(path)
    try:
        defaults = SacConfig()
        cfg_fields = {k: type(getattr(defaults, k))(float(meta[k]))
                      for k in SacConfig.__dataclass_fields__ if k in meta}
        agent = SacAgent(int(meta["obs_dim"]), int(meta["act_dim"]), SacConfig(**cfg_fields))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: not an IK policy checkpoint ({exc})") from None
    for name in ("policy", "q1", "q2", "q1_target", "q2_target"):
        getattr(agent, name).copy_from(nets[name])
    return agent, meta
