"""Data model for images, depth maps, camera geometry, and the synthetic scene oracle.

All types are immutable value objects: validated at construction, never mutated
afterwards, safe to share across threads. The synthetic generator ray-casts
Lambertian textured primitives so that every geometric quantity (depth, pose,
normals, photoconsistency) has an analytic ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

DEPTH_MIN_M = 0.1
DEPTH_MAX_M = 10.0

# Sequence directory layout (see save_sequence / load_sequence):
#   frame_%05d.png   8-bit RGB
#   depth_%05d.pgm   16-bit grayscale, millimeters (optional)
#   manifest.json    fx, fy, cx, cy, frame count, optional row-major 3x4 poses
FRAME_PATTERN = "frame_{:05d}.png"
DEPTH_PATTERN = "depth_{:05d}.pgm"
PSEUDO_PATTERN = "pseudo_{:05d}.pgm"
MANIFEST_NAME = "manifest.json"


class DataError(ValueError):
    """Invalid data-model construction or file contents."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DataError(msg)


@dataclass(frozen=True)
class Image:
    """RGB image with float values in [0, 1], shape (H, W, 3)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        _require(v.ndim == 3 and v.shape[2] == 3, f"image must be (H, W, 3), got {v.shape}")
        _require(bool(np.isfinite(v).all()), "image values must be finite")
        _require(bool((v >= 0).all() and (v <= 1).all()), "image values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in meters with a validity mask."""

    depth: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float32)
        m = np.asarray(self.valid_mask, dtype=bool)
        _require(d.ndim == 2, f"depth must be (H, W), got {d.shape}")
        _require(m.shape == d.shape, "valid_mask shape must match depth")
        _require(bool(np.isfinite(d).all()), "depth must be finite")
        _require(bool((d[m] > 0).all()) if m.any() else True, "depth must be > 0 where valid")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid_mask", m)

    @classmethod
    def dense(cls, depth: np.ndarray) -> "DepthMap":
        depth = np.asarray(depth, dtype=np.float32)
        return cls(depth=depth, valid_mask=np.ones_like(depth, dtype=bool))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            _require(math.isfinite(getattr(self, name)), f"{name} must be finite")
        _require(self.fx > 0 and self.fy > 0, "focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def check_bounds(self, height: int, width: int) -> None:
        _require(0 <= self.cx <= width - 1, f"cx={self.cx} outside image width {width}")
        _require(0 <= self.cy <= height - 1, f"cy={self.cy} outside image height {height}")

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        """Intrinsics after resizing the image by (sx, sy)."""
        return Intrinsics(fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy)


@dataclass(frozen=True)
class Pose6D:
    """Relative camera pose as axis-angle rotation + translation."""

    rotation: np.ndarray  # (3,) axis-angle, radians, |theta| < pi
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _require(bool(np.isfinite(r).all() and np.isfinite(t).all()), "pose must be finite")
        _require(float(np.linalg.norm(r)) < math.pi, "rotation magnitude must be < pi")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class SE3Transform:
    """Rigid transform: x -> R @ x + t."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _require(bool(np.isfinite(R).all() and np.isfinite(t).all()), "transform must be finite")
        _require(
            float(np.abs(R @ R.T - np.eye(3)).max()) < 1e-6,
            "rotation must be orthonormal within 1e-6",
        )
        _require(abs(float(np.linalg.det(R)) - 1.0) < 1e-6, "rotation determinant must be 1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """Row-major 3x4 [R | t]."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)


def rotation_from_axis_angle(r: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a (3,) axis-angle vector."""
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(r))
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    K = np.array(
        [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]], dtype=np.float64
    )
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Log map of a rotation matrix; returns |theta| <= pi axis-angle."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta < 1e-12:
        return np.zeros(3)
    if abs(theta - math.pi) < 1e-6:
        # near pi the antisymmetric part degenerates; recover axis from R + I
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs using off-diagonal entries
        i = int(np.argmax(axis))
        if axis[i] > 0:
            for j in range(3):
                if j != i:
                    axis[j] = A[i, j] / axis[i] if axis[i] > 1e-12 else axis[j]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * math.sin(theta)) * v


def se3_from_6d(p: Pose6D) -> SE3Transform:
    """Exponential map on the rotation, translation copied."""
    return SE3Transform(rotation=rotation_from_axis_angle(p.rotation), translation=p.translation)


def se3_to_6d(T: SE3Transform) -> Pose6D:
    return Pose6D(rotation=axis_angle_from_rotation(T.rotation), translation=T.translation)


def se3_compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """Transform applying b first, then a: x -> a(b(x))."""
    return SE3Transform(
        rotation=a.rotation @ b.rotation,
        translation=a.rotation @ b.translation + a.translation,
    )


def se3_invert(a: SE3Transform) -> SE3Transform:
    Rt = a.rotation.T
    return SE3Transform(rotation=Rt, translation=-Rt @ a.translation)


@dataclass(frozen=True)
class FrameSequence:
    """Consecutive video frames with intrinsics and optional ground truth."""

    frames: tuple[Image, ...]
    intrinsics: Intrinsics
    gt_depths: tuple[DepthMap, ...] | None = None
    gt_poses: tuple[SE3Transform, ...] | None = None  # frame i -> i+1

    def __post_init__(self):
        frames = tuple(self.frames)
        _require(len(frames) >= 2, "sequence needs at least 2 frames")
        h, w = frames[0].height, frames[0].width
        _require(
            all(f.height == h and f.width == w for f in frames),
            "all frames must share one resolution",
        )
        self.intrinsics.check_bounds(h, w)
        if self.gt_depths is not None:
            depths = tuple(self.gt_depths)
            _require(len(depths) == len(frames), "gt_depths must match frame count")
            _require(
                all(d.height == h and d.width == w for d in depths),
                "gt depth resolution must match frames",
            )
            object.__setattr__(self, "gt_depths", depths)
        if self.gt_poses is not None:
            poses = tuple(self.gt_poses)
            _require(len(poses) == len(frames) - 1, "gt_poses must have frame count - 1 entries")
            object.__setattr__(self, "gt_poses", poses)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextureSpec:
    """Procedural Lambertian albedo: smooth value noise plus a soft sinusoid checker.

    Both components are smooth in the surface coordinates, keeping bilinear
    interpolation error of rendered views far below the photometric tolerance.
    """

    base_color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    checker_amplitude: float = 0.2
    checker_period: float = 0.7  # in surface units (meters for planes)
    noise_amplitude: float = 0.15
    noise_cells: int = 4
    seed: int = 0


@dataclass(frozen=True)
class PlanePrimitive:
    """Bounded textured rectangle: center + two orthogonal in-plane axes."""

    center: tuple[float, float, float]
    axis_u: tuple[float, float, float]  # unit direction, scaled by half_extent internally
    axis_v: tuple[float, float, float]
    half_extent_u: float
    half_extent_v: float
    texture: TextureSpec = field(default_factory=TextureSpec)
    unbounded: bool = False  # background planes ignore the extents


@dataclass(frozen=True)
class SpherePrimitive:
    center: tuple[float, float, float]
    radius: float
    texture: TextureSpec = field(default_factory=TextureSpec)


@dataclass(frozen=True)
class CameraTrajectory:
    """Camera-to-world pose per frame, built from per-step motion increments."""

    n_frames: int
    step_translation: tuple[float, float, float] = (0.05, 0.0, 0.0)
    step_rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # axis-angle per step

    def baseline(self) -> float:
        return float(np.linalg.norm(self.step_translation)) + float(
            np.linalg.norm(self.step_rotation)
        )

    def camera_to_world(self, i: int) -> SE3Transform:
        step = SE3Transform(
            rotation=rotation_from_axis_angle(np.array(self.step_rotation)),
            translation=np.array(self.step_translation, dtype=np.float64),
        )
        pose = SE3Transform.identity()
        for _ in range(i):
            pose = se3_compose(pose, step)
        return pose


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[PlanePrimitive | SpherePrimitive, ...]
    trajectory: CameraTrajectory
    height: int = 64
    width: int = 64
    intrinsics: Intrinsics | None = None  # default: fx = fy = width, centered
    seed: int = 0

    def __post_init__(self):
        _require(len(self.primitives) >= 1, "scene needs at least one primitive")
        _require(self.trajectory.n_frames >= 2, "trajectory needs >= 2 frames")

    def resolved_intrinsics(self) -> Intrinsics:
        if self.intrinsics is not None:
            return self.intrinsics
        return Intrinsics(
            fx=float(self.width),
            fy=float(self.width),
            cx=(self.width - 1) / 2.0,
            cy=(self.height - 1) / 2.0,
        )


def _texture_rgb(tex: TextureSpec, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
    """Evaluate the procedural albedo at surface coordinates (su, sv); (..., 3)."""
    rng = np.random.default_rng(tex.seed)
    grid = rng.uniform(0.0, 1.0, size=(tex.noise_cells + 1, tex.noise_cells + 1, 3))
    # wrap coordinates into the noise grid and interpolate bilinearly (smooth everywhere
    # except measure-zero cell lines)
    gu = (su / (4.0 * tex.checker_period)) % 1.0 * tex.noise_cells
    gv = (sv / (4.0 * tex.checker_period)) % 1.0 * tex.noise_cells
    u0 = np.floor(gu).astype(int)
    v0 = np.floor(gv).astype(int)
    fu = (gu - u0)[..., None]
    fv = (gv - v0)[..., None]
    n00 = grid[u0, v0]
    n10 = grid[np.minimum(u0 + 1, tex.noise_cells), v0]
    n01 = grid[u0, np.minimum(v0 + 1, tex.noise_cells)]
    n11 = grid[np.minimum(u0 + 1, tex.noise_cells), np.minimum(v0 + 1, tex.noise_cells)]
    noise = (1 - fu) * (1 - fv) * n00 + fu * (1 - fv) * n10 + (1 - fu) * fv * n01 + fu * fv * n11

    phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
    checker = (
        np.sin(2.0 * math.pi * su[..., None] / tex.checker_period + phase)
        * np.sin(2.0 * math.pi * sv[..., None] / tex.checker_period + phase * 0.5)
    )
    rgb = (
        np.asarray(tex.base_color)[None, :]
        + tex.checker_amplitude * checker.reshape(-1, 3)
        + tex.noise_amplitude * (noise.reshape(-1, 3) - 0.5)
    )
    return np.clip(rgb, 0.0, 1.0).reshape(su.shape + (3,))


def _intersect_plane(
    prim: PlanePrimitive, origins: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-rectangle intersection. Returns (t, su, sv) with t = inf where missed."""
    c = np.asarray(prim.center, dtype=np.float64)
    au = np.asarray(prim.axis_u, dtype=np.float64)
    av = np.asarray(prim.axis_v, dtype=np.float64)
    au = au / np.linalg.norm(au)
    av = av / np.linalg.norm(av)
    n = np.cross(au, av)
    denom = dirs @ n
    num = (c - origins) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
    hit = origins + t[..., None] * dirs
    su = (hit - c) @ au
    sv = (hit - c) @ av
    inside = (t > 1e-9) & np.isfinite(t)
    if not prim.unbounded:
        inside &= (np.abs(su) <= prim.half_extent_u) & (np.abs(sv) <= prim.half_extent_v)
    t = np.where(inside, t, np.inf)
    return t, su, sv


def _intersect_sphere(
    prim: SpherePrimitive, origins: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-sphere intersection; surface coords are scaled spherical angles."""
    c = np.asarray(prim.center, dtype=np.float64)
    oc = origins - c
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(oc * dirs, axis=-1)
    cc = np.sum(oc * oc, axis=-1) - prim.radius**2
    disc = b * b - 4 * a * cc
    sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sqrt_disc) / (2 * a)
    t1 = (-b + sqrt_disc) / (2 * a)
    t = np.where(t0 > 1e-9, t0, t1)
    valid = (disc >= 0) & (t > 1e-9)
    t = np.where(valid, t, np.inf)
    hit = origins + t[..., None] * dirs - c
    # angles scaled by radius so checker_period keeps metric meaning
    theta = np.arctan2(hit[..., 1], hit[..., 0]) * prim.radius
    phi = np.arccos(np.clip(hit[..., 2] / prim.radius, -1.0, 1.0)) * prim.radius
    return t, theta, phi


def generate_synthetic_sequence(
    spec: SceneSpec, require_parallax: bool = True
) -> FrameSequence:
    """Ray-cast the scene along the trajectory; ground truth populated exactly.

    A zero-motion trajectory is rejected by default because view synthesis
    needs parallax; pass require_parallax=False to render a degenerate
    (static-camera) sequence anyway.
    """
    if require_parallax and spec.trajectory.baseline() <= 0.0:
        raise DataError("degenerate trajectory: zero camera motion provides no parallax")
    K = spec.resolved_intrinsics()
    K.check_bounds(spec.height, spec.width)
    h, w = spec.height, spec.width

    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays_cam = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1)

    frames: list[Image] = []
    depths: list[DepthMap] = []
    cams: list[SE3Transform] = []
    for i in range(spec.trajectory.n_frames):
        c2w = spec.trajectory.camera_to_world(i)
        cams.append(c2w)
        dirs = rays_cam @ c2w.rotation.T  # ray parameter equals camera-frame z depth
        origins = np.broadcast_to(c2w.translation, dirs.shape)

        best_t = np.full((h, w), np.inf)
        color = np.zeros((h, w, 3))
        for prim in spec.primitives:
            if isinstance(prim, PlanePrimitive):
                t, su, sv = _intersect_plane(prim, origins, dirs)
            else:
                t, su, sv = _intersect_sphere(prim, origins, dirs)
            closer = t < best_t
            if closer.any():
                rgb = _texture_rgb(prim.texture, su, sv)
                color = np.where(closer[..., None], rgb, color)
                best_t = np.where(closer, t, best_t)

        if not np.isfinite(best_t).all():
            raise DataError("scene leaves uncovered pixels; add an unbounded background plane")
        if best_t.min() < DEPTH_MIN_M or best_t.max() > DEPTH_MAX_M:
            raise DataError(
                f"scene depth range [{best_t.min():.3f}, {best_t.max():.3f}] outside "
                f"[{DEPTH_MIN_M}, {DEPTH_MAX_M}] m"
            )
        frames.append(Image(values=color.astype(np.float32)))
        depths.append(DepthMap.dense(best_t.astype(np.float32)))

    poses = tuple(
        se3_compose(se3_invert(cams[i + 1]), cams[i]) for i in range(len(cams) - 1)
    )
    return FrameSequence(
        frames=tuple(frames), intrinsics=K, gt_depths=tuple(depths), gt_poses=poses
    )


def random_scene_spec(seed: int, n_frames: int = 4, height: int = 64, width: int = 64) -> SceneSpec:
    """Random desk-scale scene: tilted background plane, 1-2 foreground primitives, mild motion."""
    rng = np.random.default_rng(seed)
    background = PlanePrimitive(
        center=(0.0, 0.0, float(rng.uniform(3.0, 4.5))),
        axis_u=(1.0, 0.0, float(rng.uniform(-0.15, 0.15))),
        axis_v=(0.0, 1.0, float(rng.uniform(-0.15, 0.15))),
        half_extent_u=1.0,
        half_extent_v=1.0,
        unbounded=True,
        texture=TextureSpec(
            base_color=tuple(rng.uniform(0.35, 0.65, size=3)),
            checker_period=float(rng.uniform(0.6, 1.0)),
            seed=int(rng.integers(0, 2**31)),
        ),
    )
    prims: list[PlanePrimitive | SpherePrimitive] = [background]
    for _ in range(int(rng.integers(1, 3))):
        if rng.uniform() < 0.7:
            prims.append(
                PlanePrimitive(
                    center=(
                        float(rng.uniform(-0.6, 0.6)),
                        float(rng.uniform(-0.6, 0.6)),
                        float(rng.uniform(1.5, 2.5)),
                    ),
                    axis_u=(1.0, 0.0, float(rng.uniform(-0.4, 0.4))),
                    axis_v=(0.0, 1.0, float(rng.uniform(-0.4, 0.4))),
                    half_extent_u=float(rng.uniform(0.3, 0.7)),
                    half_extent_v=float(rng.uniform(0.3, 0.7)),
                    texture=TextureSpec(
                        base_color=tuple(rng.uniform(0.3, 0.7, size=3)),
                        checker_period=float(rng.uniform(0.5, 0.9)),
                        seed=int(rng.integers(0, 2**31)),
                    ),
                )
            )
        else:
            prims.append(
                SpherePrimitive(
                    center=(
                        float(rng.uniform(-0.5, 0.5)),
                        float(rng.uniform(-0.5, 0.5)),
                        float(rng.uniform(1.8, 2.6)),
                    ),
                    radius=float(rng.uniform(0.25, 0.45)),
                    texture=TextureSpec(
                        base_color=tuple(rng.uniform(0.3, 0.7, size=3)),
                        checker_period=float(rng.uniform(0.5, 0.9)),
                        seed=int(rng.integers(0, 2**31)),
                    ),
                )
            )
    # mild motion: translation-dominant with a small rotation, per the occlusion-handling choice
    direction = rng.normal(size=3) * np.array([1.0, 0.5, 0.5])
    direction = direction / np.linalg.norm(direction)
    trajectory = CameraTrajectory(
        n_frames=n_frames,
        step_translation=tuple(direction * rng.uniform(0.03, 0.07)),
        step_rotation=tuple(rng.normal(size=3) * 0.004),
    )
    return SceneSpec(
        primitives=tuple(prims), trajectory=trajectory, height=height, width=width, seed=seed
    )


def random_closure_scene_spec(
    seed: int, n_frames: int = 2, height: int = 64, width: int = 64
) -> SceneSpec:
    """Random scene with continuous depth: intersecting unbounded tilted planes.

    Bounded primitives necessarily create silhouette discontinuities, where the
    depth inconsistency of a warp is meaningfully nonzero even at ground truth
    (it flags occlusion). These wedge scenes have creases but no depth jumps,
    so the warp-closure oracle applies to every interior pixel.
    """
    rng = np.random.default_rng(seed)

    def tilted_plane(z0: float, tilt: float) -> PlanePrimitive:
        return PlanePrimitive(
            center=(float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-0.3, 0.3)), z0),
            axis_u=(1.0, 0.0, float(rng.uniform(-tilt, tilt))),
            axis_v=(0.0, 1.0, float(rng.uniform(-tilt, tilt))),
            half_extent_u=1.0,
            half_extent_v=1.0,
            unbounded=True,
            texture=TextureSpec(
                base_color=tuple(rng.uniform(0.35, 0.65, size=3)),
                checker_period=float(rng.uniform(0.6, 1.0)),
                seed=int(rng.integers(0, 2**31)),
            ),
        )

    prims = [
        tilted_plane(float(rng.uniform(3.0, 4.0)), 0.15),
        tilted_plane(float(rng.uniform(4.5, 6.0)), 0.9),
    ]
    direction = rng.normal(size=3) * np.array([1.0, 0.5, 0.5])
    direction = direction / np.linalg.norm(direction)
    trajectory = CameraTrajectory(
        n_frames=n_frames,
        step_translation=tuple(direction * rng.uniform(0.03, 0.07)),
        step_rotation=tuple(rng.normal(size=3) * 0.004),
    )
    return SceneSpec(
        primitives=tuple(prims), trajectory=trajectory, height=height, width=width, seed=seed
    )


# ---------------------------------------------------------------------------
# Sequence directory I/O
# ---------------------------------------------------------------------------


def write_pgm16(path: Path | str, values_mm: np.ndarray) -> None:
    """16-bit binary PGM (P5, maxval 65535, big-endian)."""
    arr = np.asarray(values_mm)
    _require(arr.ndim == 2, "pgm expects a 2-D array")
    arr = np.clip(np.round(arr), 0, 65535).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm16(path: Path | str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM file")
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields: list[int] = []
    idx = 2
    while len(fields) < 3:
        while idx < len(data) and data[idx : idx + 1].isspace():
            idx += 1
        if data[idx : idx + 1] == b"#":
            while idx < len(data) and data[idx : idx + 1] != b"\n":
                idx += 1
            continue
        start = idx
        while idx < len(data) and not data[idx : idx + 1].isspace():
            idx += 1
        fields.append(int(data[start:idx]))
    idx += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 65535:
        raise DataError(f"{path}: expected 16-bit PGM (maxval 65535), got {maxval}")
    arr = np.frombuffer(data[idx : idx + 2 * w * h], dtype=">u2")
    if arr.size != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return arr.reshape(h, w).astype(np.uint16)


def save_sequence(seq: FrameSequence, path: Path | str) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        arr = np.clip(np.round(frame.values * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(arr, mode="RGB").save(out / FRAME_PATTERN.format(i))
    if seq.gt_depths is not None:
        for i, d in enumerate(seq.gt_depths):
            write_pgm16(out / DEPTH_PATTERN.format(i), d.depth * 1000.0)
    manifest = {
        "fx": seq.intrinsics.fx,
        "fy": seq.intrinsics.fy,
        "cx": seq.intrinsics.cx,
        "cy": seq.intrinsics.cy,
        "frame_count": len(seq.frames),
    }
    if seq.gt_poses is not None:
        manifest["poses"] = [p.matrix().reshape(-1).tolist() for p in seq.gt_poses]
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2)


def load_sequence(path: Path | str) -> FrameSequence:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"missing {MANIFEST_NAME} in {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    intr = Intrinsics(
        fx=float(manifest["fx"]),
        fy=float(manifest["fy"]),
        cx=float(manifest["cx"]),
        cy=float(manifest["cy"]),
    )
    n = int(manifest["frame_count"])
    frames = []
    for i in range(n):
        fp = root / FRAME_PATTERN.format(i)
        if not fp.exists():
            raise DataError(f"missing frame file {fp}")
        arr = np.asarray(PILImage.open(fp).convert("RGB"), dtype=np.float32) / 255.0
        frames.append(Image(values=arr))
    depths = None
    if (root / DEPTH_PATTERN.format(0)).exists():
        depths = []
        for i in range(n):
            mm = read_pgm16(root / DEPTH_PATTERN.format(i)).astype(np.float32)
            valid = mm > 0
            meters = np.where(valid, mm / 1000.0, 1.0)
            depths.append(DepthMap(depth=meters, valid_mask=valid))
        depths = tuple(depths)
    poses = None
    if "poses" in manifest:
        poses = tuple(
            SE3Transform(
                rotation=np.asarray(row, dtype=np.float64).reshape(3, 4)[:, :3],
                translation=np.asarray(row, dtype=np.float64).reshape(3, 4)[:, 3],
            )
            for row in manifest["poses"]
        )
    return FrameSequence(
        frames=tuple(frames), intrinsics=intr, gt_depths=depths, gt_poses=poses
    )
