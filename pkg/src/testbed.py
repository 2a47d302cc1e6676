import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from src.config import worker_count
from src.data_processor import Dataset, Episode, Sample
from src.modality import ModalityLayout

logger = logging.getLogger(__name__)

DEFAULT_NOISE = 0.005
GRAVITY = 9.81
QUANTITY_GROUPS = {"tool_tip": "x_tool", "cog": "x_cog", "joint": "theta", "tension": "f", "length": "l", "image": "s_tool"}


class CommandLimitError(ValueError):
    """Raised when a command lies outside a world's joint limits."""


def oracle_error(world: "World", quantity: str, claimed, actual) -> float:
    """
    Euclidean error in world units; mean over rows for a batch.

    Raises:
        ValueError: For an unknown quantity, one the world does not produce, or mismatched shapes.
    """
    if quantity not in QUANTITY_GROUPS:
        raise ValueError(f"Unknown quantity '{quantity}', expected one of {sorted(QUANTITY_GROUPS)}")
    group = QUANTITY_GROUPS[quantity]
    layout = world.layout
    if group not in layout:
        raise ValueError(f"{type(world).__name__} has no '{quantity}' ({group}), only {layout.names}")
    claimed = np.atleast_2d(np.asarray(claimed, dtype=float))
    actual = np.atleast_2d(np.asarray(actual, dtype=float))
    if claimed.shape != actual.shape or claimed.shape[1] != layout.dim(group):
        raise ValueError(
            f"Claimed {claimed.shape} and actual {actual.shape} must both have {layout.dim(group)} columns of '{group}'"
        )
    return float(np.linalg.norm(claimed - actual, axis=1).mean())


class World:
    """
    Analytic simulator producing ground-truth samples over a fixed layout.

    Subclasses define the layout, the command limits, a nominal scale per
    group (noise is given in units of it) and `clean(command)`.
    """

    groups: Tuple[Tuple[str, int], ...] = ()
    group_scales: Dict[str, float] = {}
    noise: Dict[str, float] = {}

    @property
    def layout(self) -> ModalityLayout:
        return ModalityLayout(self.groups)

    @property
    def state_id(self) -> str:
        raise NotImplementedError

    @property
    def limits(self) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def clean(self, command: np.ndarray) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def check_command(self, command: Sequence[float]) -> np.ndarray:
        command = np.asarray(command, dtype=float).reshape(-1)
        low, high = self.limits
        if command.shape != low.shape:
            raise CommandLimitError(f"Command has {command.size} values, world expects {low.size}")
        if np.any(command < low - 1e-12) or np.any(command > high + 1e-12):
            raise CommandLimitError(f"Command {np.round(command, 4).tolist()} outside limits [{low.tolist()}, {high.tolist()}]")
        return command

    def noise_std(self, name: str) -> float:
        return self.noise.get(name, DEFAULT_NOISE) * self.group_scales[name]

    def observe(
        self,
        command: Sequence[float],
        available: Optional[Sequence[str]] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Sample:
        """Noisy observation of every group; groups outside `available` are flagged missing."""
        values = self.clean(self.check_command(command))
        layout = self.layout
        flags = tuple(available is None or name in available for name in layout.names)
        parts = {}
        for name in layout.names:
            value = np.asarray(values[name], dtype=float)
            if rng is not None:
                value = value + rng.normal(0.0, self.noise_std(name), size=value.shape)
            parts[name] = value
        sample = Sample(layout.join(parts), tuple(True for _ in layout.names), self.state_id)
        return sample.with_availability(layout, flags)

    def random_commands(self, n: int, rng: np.random.Generator) -> np.ndarray:
        low, high = self.limits
        return rng.uniform(low, high, size=(n, low.size))

    def random_rollout(self, n_samples: int, seed: int = 0, available: Optional[Sequence[str]] = None) -> Episode:
        """`n_samples` observations under uniform random commands, reproducible by seed."""
        if n_samples < 1:
            raise ValueError(f"n_samples must be positive, got {n_samples}")
        rng = np.random.default_rng(seed)
        commands = self.random_commands(n_samples, rng)
        return Episode(self.state_id, [self.observe(c, available, rng) for c in commands])

    def scripted_rollout(
        self, commands: Sequence[Sequence[float]], seed: int = 0, available: Optional[Sequence[str]] = None
    ) -> Episode:
        """Observations for an explicit command schedule."""
        if len(commands) == 0:
            raise ValueError("A scripted rollout needs at least one command")
        rng = np.random.default_rng(seed)
        return Episode(self.state_id, [self.observe(c, available, rng) for c in commands])


def collect_dataset(
    worlds: Sequence[World], n_per_state: int, seed: int = 0, available: Optional[Sequence[str]] = None
) -> Dataset:
    """One random rollout per world, run in parallel with seed + index per world."""
    if not worlds:
        raise ValueError("collect_dataset needs at least one world")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        episodes = list(pool.map(
            lambda item: item[1].random_rollout(n_per_state, seed + item[0], available), enumerate(worlds)
        ))
    logger.info(f"Collected {n_per_state} samples in each of {len(worlds)} states")
    return Dataset(worlds[0].layout, episodes)


# -- world A: planar arm holding a tool ---------------------------------------------------


@dataclass(frozen=True)
class ArmToolWorld(World):
    """
    4-DOF planar arm holding a stick; the tool point hangs 100 mm below the stick tip.

    Hidden state: stick length l_tool (mm) and grasp angle phi_tool (deg).
    """

    l_tool: float = 500.0
    phi_tool: float = 30.0
    links: Tuple[float, ...] = (300.0, 300.0, 200.0, 100.0)
    droop: float = 100.0
    joint_limit: float = 0.6
    noise: Dict[str, float] = field(default_factory=dict)

    groups = (("theta", 4), ("x_tool", 2))
    group_scales = {"theta": 0.35, "x_tool": 150.0}

    LENGTHS = (300.0, 500.0, 700.0)
    ANGLES = (0.0, 30.0, 60.0)

    @classmethod
    def grid(cls, **kwargs) -> List["ArmToolWorld"]:
        return [cls(l_tool=l, phi_tool=phi, **kwargs) for l in cls.LENGTHS for phi in cls.ANGLES]

    @property
    def state_id(self) -> str:
        return f"{self.l_tool:g}_{self.phi_tool:g}"

    @property
    def limits(self):
        n = len(self.links)
        return np.full(n, -self.joint_limit), np.full(n, self.joint_limit)

    def with_state(self, l_tool: float, phi_tool: float) -> "ArmToolWorld":
        return replace(self, l_tool=l_tool, phi_tool=phi_tool)

    def stick_tip(self, theta: np.ndarray) -> np.ndarray:
        angles = np.cumsum(theta)
        wrist = np.array([np.sum(np.asarray(self.links) * np.cos(angles)), np.sum(np.asarray(self.links) * np.sin(angles))])
        direction = angles[-1] + np.deg2rad(self.phi_tool)
        return wrist + self.l_tool * np.array([np.cos(direction), np.sin(direction)])

    def clean(self, command: np.ndarray) -> Dict[str, np.ndarray]:
        theta = np.asarray(command, dtype=float)
        return {"theta": theta.copy(), "x_tool": self.stick_tip(theta) + np.array([0.0, -self.droop])}


# -- world B: tendon-driven two-joint arm -------------------------------------------------

DEFAULT_MOMENT_ARMS = ((10.0, 5.0), (-10.0, 5.0), (8.0, -12.0), (-6.0, -10.0))


@dataclass(frozen=True)
class TendonArmWorld(World):
    """
    Two joints driven by four elastic muscles.

    Muscle length follows l = l0 - R theta + c f (mm, N, rad) and tensions balance
    the gravity torque, R^T f = tau_ext(theta) in N*mm. Commands are
    (theta, f_u): the joint angles and a raw tension draw that is projected
    onto the balanced set. The default tendons are stiff (about 230 N/mm), so
    the tension spread moves the lengths by less than a millimeter.
    """

    moment_arms: Tuple[Tuple[float, float], ...] = DEFAULT_MOMENT_ARMS
    rest_lengths: Tuple[float, ...] = (200.0, 200.0, 200.0, 200.0)
    compliance: float = 0.0044
    gravity_torques: Tuple[float, float] = (300.0, 150.0)
    joint_limit: float = 1.0
    tension_range: Tuple[float, float] = (5.0, 50.0)
    noise: Dict[str, float] = field(default_factory=dict)
    frozen_muscle: Optional[Tuple[int, float]] = None
    label: str = "musculoskeletal"

    groups = (("theta", 2), ("f", 4), ("l", 4))
    group_scales = {"theta": 0.577, "f": 9.2, "l": 6.7}

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.moment_arms, dtype=float)

    @property
    def l0(self) -> np.ndarray:
        return np.asarray(self.rest_lengths, dtype=float)

    @property
    def state_id(self) -> str:
        return self.label

    @property
    def limits(self):
        low = np.concatenate([np.full(2, -self.joint_limit), np.full(4, self.tension_range[0])])
        high = np.concatenate([np.full(2, self.joint_limit), np.full(4, self.tension_range[1])])
        return low, high

    def tau_ext(self, theta: np.ndarray) -> np.ndarray:
        """Gravity torque in N*mm."""
        g1, g2 = self.gravity_torques
        c12 = np.cos(theta[0] + theta[1])
        return np.array([g1 * np.cos(theta[0]) + g2 * c12, g2 * c12])

    def tau_ext_nm(self, theta: np.ndarray) -> np.ndarray:
        return self.tau_ext(theta) * 1e-3

    def balanced_tension(self, theta: np.ndarray, f_u: np.ndarray) -> np.ndarray:
        """Project a raw tension draw so that R^T f = tau_ext(theta)."""
        R = self.R
        null = linalg.null_space(R.T)
        return null @ (null.T @ f_u) + R @ np.linalg.solve(R.T @ R, self.tau_ext(theta))

    def muscle_length(self, theta: np.ndarray, f: np.ndarray) -> np.ndarray:
        return self.l0 - self.R @ theta + self.compliance * f

    def angle_from(self, f: np.ndarray, l: np.ndarray) -> np.ndarray:
        return np.linalg.lstsq(self.R, self.l0 + self.compliance * f - l, rcond=None)[0]

    def tension_from(self, theta: np.ndarray, l: np.ndarray) -> np.ndarray:
        return (l - self.l0 + self.R @ theta) / self.compliance

    def clean(self, command: np.ndarray) -> Dict[str, np.ndarray]:
        theta, f_u = command[:2], command[2:]
        f = self.balanced_tension(theta, f_u)
        l = self.muscle_length(theta, f)
        if self.frozen_muscle is not None:
            k, stuck = self.frozen_muscle
            l = l.copy()
            l[k] = stuck
        return {"theta": theta.copy(), "f": f, "l": l}

    def settle(self, l_send: Sequence[float]) -> Dict[str, np.ndarray]:
        """
        Static state reached when the muscle lengths are held at `l_send`.

        Solves R^T R theta = c tau_ext(theta) - R^T (l_send - l0) for theta.

        Raises:
            ValueError: If the equilibrium solve does not converge.
        """
        l_send = np.asarray(l_send, dtype=float).reshape(-1)
        R, c = self.R, self.compliance
        gram = R.T @ R
        rhs = -R.T @ (l_send - self.l0)

        def residual(theta):
            return gram @ theta - c * self.tau_ext(theta) - rhs

        start = np.linalg.solve(gram, rhs)
        solution = optimize.root(residual, start, tol=1e-12)
        if not solution.success:
            raise ValueError(f"Equilibrium for l_send={l_send.tolist()} did not converge: {solution.message}")
        theta = solution.x
        f = self.tension_from(theta, l_send)
        return {"theta": theta, "f": f, "l": l_send.copy()}

    def with_frozen_muscle(self, k: int, stuck_length: float) -> "TendonArmWorld":
        """Copy whose length reading of muscle k stays at `stuck_length`."""
        if not 0 <= k < self.R.shape[0]:
            raise ValueError(f"Muscle index {k} out of range for {self.R.shape[0]} muscles")
        return replace(self, frozen_muscle=(int(k), float(stuck_length)))


# -- world C: small biped whose joints deflect under load -----------------------------------


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class DeflectingBipedWorld(World):
    """
    Ankle-pitch body with a shoulder pitch/yaw, elbow pitch arm holding a tool.

    Every realized joint angle is the command plus k times its gravity torque,
    solved as a fixed point. Command order: shoulder pitch, shoulder yaw,
    elbow pitch, ankle pitch (rad). Lengths in mm, masses in kg.
    """

    tool_mass: float = 0.08
    tool_length: float = 176.0
    k_deg_per_nm: float = 30.0
    trunk: float = 80.0
    shoulder_offset: float = 30.0
    upper_arm: float = 60.0
    forearm: float = 60.0
    body_mass: float = 0.5
    segment_mass: float = 0.03
    camera_x: float = 600.0
    camera_z: float = 100.0
    focal: float = 500.0
    joint_limits: Tuple[float, float, float, float] = (0.8, 0.6, 0.8, 0.2)
    noise: Dict[str, float] = field(default_factory=dict)

    groups = (("theta", 4), ("x_cog", 2), ("x_tool", 2), ("s_tool", 2))
    group_scales = {"theta": 0.4, "x_cog": 10.0, "x_tool": 60.0, "s_tool": 60.0}

    MASSES = (0.04, 0.08, 0.12)
    TOOL_LENGTHS = (176.0, 236.0)

    @classmethod
    def tool_states(cls, **kwargs) -> List["DeflectingBipedWorld"]:
        return [cls(tool_mass=m, tool_length=l, **kwargs) for m in cls.MASSES for l in cls.TOOL_LENGTHS]

    @property
    def state_id(self) -> str:
        return f"{self.tool_mass * 1000:g}g_{self.tool_length:g}mm"

    @property
    def limits(self):
        high = np.asarray(self.joint_limits, dtype=float)
        return -high, high

    @property
    def k(self) -> float:
        return np.deg2rad(self.k_deg_per_nm)

    def _chain(self, q: np.ndarray):
        """Joint positions/axes and point masses (position mm, mass kg) for realized angles q."""
        shoulder_p, shoulder_y, elbow_p, ankle_p = q
        r_body = _rot_y(ankle_p)
        shoulder = r_body @ np.array([0.0, self.shoulder_offset, self.trunk])
        r_upper = r_body @ _rot_y(shoulder_p) @ _rot_z(shoulder_y)
        elbow = shoulder + r_upper @ np.array([self.upper_arm, 0.0, 0.0])
        r_fore = r_upper @ _rot_y(elbow_p)
        wrist = elbow + r_fore @ np.array([self.forearm, 0.0, 0.0])
        tip = wrist + r_fore @ np.array([self.tool_length, 0.0, 0.0])
        masses = [
            (r_body @ np.array([0.0, 0.0, self.trunk / 2]), self.body_mass),
            ((shoulder + elbow) / 2, self.segment_mass),
            ((elbow + wrist) / 2, self.segment_mass),
            ((wrist + tip) / 2, self.tool_mass),
        ]
        # (joint position, world axis, index of first mass it carries)
        joints = [
            (shoulder, r_body @ np.array([0.0, 1.0, 0.0]), 1),
            (shoulder, r_body @ _rot_y(shoulder_p) @ np.array([0.0, 0.0, 1.0]), 1),
            (elbow, r_upper @ np.array([0.0, 1.0, 0.0]), 2),
            (np.zeros(3), np.array([0.0, 1.0, 0.0]), 0),
        ]
        return joints, masses, tip

    def gravity_torques(self, q: np.ndarray) -> np.ndarray:
        """Gravity torque about each joint axis in N*m."""
        joints, masses, _ = self._chain(q)
        torques = np.zeros(4)
        for j, (origin, axis, first) in enumerate(joints):
            for position, mass in masses[first:]:
                lever = (position - origin) * 1e-3
                torques[j] += np.cross(lever, np.array([0.0, 0.0, -mass * GRAVITY])) @ axis
        return torques

    def deflect(self, theta: np.ndarray, tol: float = 1e-9, max_iter: int = 100) -> np.ndarray:
        """
        Realized angles q = theta + k tau(q) by fixed-point iteration.

        Raises:
            ValueError: If the iteration does not reach `tol` in `max_iter` steps.
        """
        q = np.asarray(theta, dtype=float).copy()
        for _ in range(max_iter):
            q_next = theta + self.k * self.gravity_torques(q)
            if np.max(np.abs(q_next - q)) <= tol:
                return q_next
            q = q_next
        raise ValueError(f"Deflection did not converge within {max_iter} iterations for theta={np.round(theta, 4).tolist()}")

    def clean(self, command: np.ndarray) -> Dict[str, np.ndarray]:
        theta = np.asarray(command, dtype=float)
        q = self.deflect(theta)
        _, masses, tip = self._chain(q)
        total = sum(m for _, m in masses)
        cog = sum(p * m for p, m in masses) / total
        depth = self.camera_x - tip[0]
        image = self.focal * np.array([tip[1], tip[2] - self.camera_z]) / depth
        return {
            "theta": theta.copy(),
            "x_cog": cog[:2],
            "x_tool": np.array([tip[0], tip[2]]),
            "s_tool": image,
        }


WORLDS = {"A": ArmToolWorld, "B": TendonArmWorld, "C": DeflectingBipedWorld}


def make_world(name: str, params: Optional[Mapping] = None) -> World:
    if name not in WORLDS:
        raise ValueError(f"Unknown world '{name}', expected one of {sorted(WORLDS)}")
    params = dict(params or {})
    for key, value in params.items():
        if isinstance(value, list):
            params[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return WORLDS[name](**params)
