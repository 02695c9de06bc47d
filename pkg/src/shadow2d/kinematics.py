"""Serial kinematic chains: JSON schema, validation and forward kinematics.

A chain is an ordered list of links in topological order (parent before
child). Exactly one root has ``parent: null``. Revolute joints rotate the
child frame about a unit axis fixed in the child's origin frame; fixed
joints consume no state. The floating base is *not* a chain joint: forward
kinematics takes the base pose as an argument.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .geom import Pose, Quat, compose, quat_mul, rotate_vec


class ChainError(ValueError):
    """Raised for schema violations; message carries the offending field path."""


@dataclass(frozen=True, eq=False)
class Link:
    name: str
    parent: int | None
    origin: Pose
    axis: np.ndarray
    joint_type: str  # "revolute" | "fixed"
    limits: tuple[float, float]
    torque_limit: float
    mass: float
    collision_points: np.ndarray  # (P, 3) offsets in the link frame
    joint_inertia: float | None = None
    joint_friction: float | None = None


@dataclass(frozen=True, eq=False)
class KinematicChain:
    links: tuple[Link, ...]
    target_links: tuple[str, ...]
    default_pose: np.ndarray

    @property
    def n_joints(self) -> int:
        return sum(1 for l in self.links if l.joint_type == "revolute")

    @property
    def n_targets(self) -> int:
        return len(self.target_links)

    def joint_names(self) -> list[str]:
        return [l.name for l in self.links if l.joint_type == "revolute"]

    def joint_limits(self) -> np.ndarray:
        """(n_joints, 2) array of [lo, hi] per revolute joint."""
        return np.array([l.limits for l in self.links if l.joint_type == "revolute"])

    def torque_limits(self) -> np.ndarray:
        return np.array(
            [l.torque_limit for l in self.links if l.joint_type == "revolute"]
        )

    def total_mass(self) -> float:
        return float(sum(l.mass for l in self.links))

    def joint_inertias(self) -> np.ndarray:
        """Effective per-joint inertia; default sums downstream link mass * 0.1 m^2."""
        out = []
        for i, l in enumerate(self.links):
            if l.joint_type != "revolute":
                continue
            if l.joint_inertia is not None:
                out.append(l.joint_inertia)
            else:
                downstream = sum(
                    self.links[k].mass
                    for k in range(len(self.links))
                    if self._descends(k, i)
                )
                out.append(0.1 * downstream)
        return np.array(out)

    def joint_frictions(self) -> np.ndarray:
        return np.array(
            [
                l.joint_friction if l.joint_friction is not None else 0.05
                for l in self.links
                if l.joint_type == "revolute"
            ]
        )

    def _descends(self, idx: int, ancestor_idx: int) -> bool:
        cur: int | None = idx
        while cur is not None:
            if cur == ancestor_idx:
                return True
            cur = self.links[cur].parent
        return False


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ChainError(f"{path}: missing required field '{key}'")
    return obj[key]


def _load_pose(obj: dict, path: str) -> Pose:
    p = np.asarray(_require(obj, "p", path), dtype=np.float64)
    q = np.asarray(_require(obj, "q", path), dtype=np.float64)
    if p.shape != (3,):
        raise ChainError(f"{path}.p: expected 3 numbers, got shape {p.shape}")
    if q.shape != (4,):
        raise ChainError(f"{path}.q: expected [w,x,y,z], got shape {q.shape}")
    return Pose(p, Quat.from_wxyz(q))


def load_chain(text: str) -> KinematicChain:
    """Parse and validate a chain-description JSON document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ChainError(f"invalid JSON: {e}") from e

    raw_links = _require(doc, "links", "$")
    if not isinstance(raw_links, list) or not raw_links:
        raise ChainError("$.links: must be a non-empty list")

    names: dict[str, int] = {}
    links: list[Link] = []
    root_count = 0
    for i, raw in enumerate(raw_links):
        path = f"$.links[{i}]"
        name = _require(raw, "name", path)
        if name in names:
            raise ChainError(f"{path}.name: duplicate link name '{name}'")
        parent_name = _require(raw, "parent", path)
        if parent_name is None:
            parent = None
            root_count += 1
        else:
            if parent_name not in names:
                raise ChainError(
                    f"{path}.parent: '{parent_name}' not defined before '{name}' "
                    "(cycle or bad topological order)"
                )
            parent = names[parent_name]
        origin = _load_pose(_require(raw, "origin", path), f"{path}.origin")
        axis = np.asarray(_require(raw, "axis", path), dtype=np.float64)
        if axis.shape != (3,):
            raise ChainError(f"{path}.axis: expected 3 numbers")
        joint_type = _require(raw, "type", path)
        if joint_type not in ("revolute", "fixed"):
            raise ChainError(f"{path}.type: '{joint_type}' not in (revolute, fixed)")
        if joint_type == "revolute" and abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ChainError(f"{path}.axis: joint axis must be unit norm")
        limits = tuple(_require(raw, "limits", path))
        if len(limits) != 2:
            raise ChainError(f"{path}.limits: expected [lo, hi]")
        if joint_type == "revolute" and not limits[0] < limits[1]:
            raise ChainError(f"{path}.limits: need lo < hi, got {limits}")
        cps = np.asarray(raw.get("collision_points", []), dtype=np.float64)
        cps = cps.reshape(-1, 3) if cps.size else np.zeros((0, 3))
        links.append(
            Link(
                name=name,
                parent=parent,
                origin=origin,
                axis=axis,
                joint_type=joint_type,
                limits=(float(limits[0]), float(limits[1])),
                torque_limit=float(_require(raw, "torque_limit", path)),
                mass=float(_require(raw, "mass", path)),
                collision_points=cps,
                joint_inertia=raw.get("joint_inertia"),
                joint_friction=raw.get("joint_friction"),
            )
        )
        names[name] = i

    if root_count != 1:
        raise ChainError(f"$.links: expected exactly one root link, found {root_count}")
    if links[0].parent is not None or links[0].joint_type != "fixed":
        raise ChainError(
            "$.links[0]: the first link must be the fixed root (the floating base "
            "is not a chain joint)"
        )

    target_links = tuple(_require(doc, "target_links", "$"))
    for t in target_links:
        if t not in names:
            raise ChainError(f"$.target_links: unknown link '{t}'")

    n_rev = sum(1 for l in links if l.joint_type == "revolute")
    default_pose = np.asarray(_require(doc, "default_pose", "$"), dtype=np.float64)
    if default_pose.shape != (n_rev,):
        raise ChainError(
            f"$.default_pose: expected {n_rev} values (one per revolute joint), "
            f"got {default_pose.shape}"
        )
    lim = np.array([l.limits for l in links if l.joint_type == "revolute"])
    if n_rev and not ((default_pose >= lim[:, 0]) & (default_pose <= lim[:, 1])).all():
        raise ChainError("$.default_pose: value outside joint limits")

    return KinematicChain(tuple(links), target_links, default_pose)


def load_chain_file(path_or_name: str) -> KinematicChain:
    """Load a chain from a path, or a bundled chain by bare name (e.g. 'planar5')."""
    import os

    if os.path.exists(path_or_name):
        with open(path_or_name) as f:
            return load_chain(f.read())
    bundled = resources.files("shadow2d.data").joinpath(f"{path_or_name}.json")
    if bundled.is_file():
        return load_chain(bundled.read_text())
    raise ChainError(f"chain '{path_or_name}' is neither a file nor a bundled chain")


def forward_kinematics(chain: KinematicChain, base: Pose, theta) -> dict[str, Pose]:
    """World pose of every link for base pose ``base`` and joint vector ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (chain.n_joints,):
        raise ChainError(
            f"theta has shape {theta.shape}, chain has {chain.n_joints} revolute joints"
        )
    poses: list[Pose] = []
    out: dict[str, Pose] = {}
    j = 0
    for link in chain.links:
        parent_pose = base if link.parent is None else poses[link.parent]
        if link.parent is None:
            pose = base  # root frame is the base, its origin is ignored
        else:
            pose = compose(parent_pose, link.origin)
            if link.joint_type == "revolute":
                rot = Quat.from_axis_angle(link.axis * theta[j])
                pose = Pose(pose.p, quat_mul(pose.q, rot))
                j += 1
        poses.append(pose)
        out[link.name] = pose
    return out


def link_positions_in_base(chain: KinematicChain, theta) -> np.ndarray:
    """(n_targets, 3) target-link positions with the base at the identity."""
    fk = forward_kinematics(chain, Pose.identity(), theta)
    return np.array([fk[name].p for name in chain.target_links])


def collision_points_world(
    chain: KinematicChain, base: Pose, theta
) -> np.ndarray:
    """All collision points of all links, stacked (P, 3), in the world frame."""
    fk = forward_kinematics(chain, base, theta)
    pts = []
    for link in chain.links:
        pose = fk[link.name]
        for cp in link.collision_points:
            pts.append(pose.p + rotate_vec(pose.q, cp))
    return np.array(pts) if pts else np.zeros((0, 3))
