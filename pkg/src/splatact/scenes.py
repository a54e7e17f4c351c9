"""Procedural tabletop scenes with analytic depth, features, and demos.

A camera at the origin looks down +z at a finite square table.  One to six
convex objects (boxes, spheres, cylinders, thin plates) rest on the table,
each carrying a distinct class id.  Everything downstream of a ``SceneSpec``
is a pure function of the spec, so scenes regenerate bit-identically.

Per scene the generator produces:

* a 224 x 224 depth map from closed-form ray intersections (background rays
  return the far-plane constant);
* 256 patch features: a class-keyed embedding plus a positional ramp plus
  seeded Gaussian noise, one patch owner chosen by majority pixel coverage;
* a grasp annotation (the four "thoughts"): target centroid, grasp offset and
  surface normal, clearances, and three waypoint deltas;
* a scripted 10-step demonstration with bounded per-step motion and a
  monotone gripper channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vocab
from .camera import GRID, IMAGE_SIZE, PATCH, Intrinsics
from .vocab import ChainFlags, ThoughtChain

SHAPES = ("box", "sphere", "cylinder", "thin_plate")

WORKSPACE_LO = np.array([-0.5, -0.5, 0.2])
WORKSPACE_HI = np.array([0.5, 0.5, 1.0])
FAR_PLANE = 2.0
TABLE_HALF = 0.55
TABLE_UP = np.array([0.0, 0.0, -1.0])  # surface normal, toward the camera

PRE_GRASP_CLEARANCE = 0.10
RETRACT_CLEARANCE = 0.15
CHUNK_LEN = 10
MAX_STEP_POS = 0.05
MAX_STEP_ROT = 0.2
START_OFFSET_RADIUS = 0.012
MAX_SPHERE_TILT = np.deg2rad(20.0)

FEATURE_DIM = 64
FEATURE_NOISE = 0.05
_CLASS_KEY = 9001
_RAMP_KEY = 9002
_BACKGROUND_CLASS = 999
NO_NEIGHBOR_DISTANCE = 0.63


class GenerationError(RuntimeError):
    """A scene spec that cannot produce a valid sample."""


@dataclass
class ObjectRecord:
    shape: str
    class_id: int
    centroid: np.ndarray      # (3,) camera frame
    half_extents: np.ndarray  # (3,) strictly positive
    grasp_point: np.ndarray   # (3,) on the surface
    grasp_normal: np.ndarray  # (3,) unit, outward

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "class_id": int(self.class_id),
            "centroid": self.centroid.tolist(),
            "half_extents": self.half_extents.tolist(),
            "grasp_point": self.grasp_point.tolist(),
            "grasp_normal": self.grasp_normal.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectRecord":
        return cls(
            shape=d["shape"],
            class_id=int(d["class_id"]),
            centroid=np.asarray(d["centroid"], dtype=np.float64),
            half_extents=np.asarray(d["half_extents"], dtype=np.float64),
            grasp_point=np.asarray(d["grasp_point"], dtype=np.float64),
            grasp_normal=np.asarray(d["grasp_normal"], dtype=np.float64),
        )


@dataclass
class SceneSpec:
    seed: int
    table_height: float
    objects: list
    target_index: int
    verb_id: int = 0
    table_half: float = TABLE_HALF
    intrinsics: Intrinsics = field(default_factory=Intrinsics)

    def validate(self) -> None:
        if not self.objects:
            raise GenerationError("scene has no objects")
        if not (0 <= self.target_index < len(self.objects)):
            raise GenerationError(f"target index {self.target_index} out of range")
        classes = [o.class_id for o in self.objects]
        if len(set(classes)) != len(classes):
            raise GenerationError("object class ids must be unique within a scene")
        for i, o in enumerate(self.objects):
            if o.shape not in SHAPES:
                raise GenerationError(f"object {i}: unknown shape {o.shape!r}")
            if not (o.half_extents > 0).all():
                raise GenerationError(f"object {i}: non-positive half extents")
            if ((o.centroid < WORKSPACE_LO) | (o.centroid > WORKSPACE_HI)).any():
                raise GenerationError(
                    f"object {i}: centroid {o.centroid} outside the workspace box"
                )
            if abs(np.linalg.norm(o.grasp_normal) - 1.0) > 1e-9:
                raise GenerationError(f"object {i}: grasp normal is not unit length")

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": 1,
                "seed": int(self.seed),
                "table_height": self.table_height,
                "table_half": self.table_half,
                "target_index": int(self.target_index),
                "verb_id": int(self.verb_id),
                "intrinsics": self.intrinsics.to_dict(),
                "objects": [o.to_dict() for o in self.objects],
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        return cls(
            seed=int(d["seed"]),
            table_height=float(d["table_height"]),
            table_half=float(d.get("table_half", TABLE_HALF)),
            objects=[ObjectRecord.from_dict(o) for o in d["objects"]],
            target_index=int(d["target_index"]),
            verb_id=int(d.get("verb_id", 0)),
            intrinsics=Intrinsics.from_dict(d["intrinsics"]),
        )


@dataclass
class SceneSample:
    spec: SceneSpec
    depth: np.ndarray          # (224, 224)
    features: np.ndarray       # (256, FEATURE_DIM)
    patch_owner: np.ndarray    # (256,) object index or -1 for background
    chain: ThoughtChain
    proprio: np.ndarray        # (7,) start pose: xyz, rotation vector, gripper
    actions: np.ndarray        # (CHUNK_LEN, 7) position deltas, rotation deltas, gripper


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _ray_dirs(intr: Intrinsics) -> np.ndarray:
    """Per-pixel direction (x', y', 1); with this scaling the ray parameter
    equals camera-frame depth z."""
    u = np.arange(IMAGE_SIZE, dtype=np.float64)
    x = (u - intr.cx) / intr.fx
    y = (u - intr.cy) / intr.fy
    dx, dy = np.meshgrid(x, y)
    return dx.ravel(), dy.ravel()


def _intersect_box(dx, dy, centroid, half) -> np.ndarray:
    """Depth of the nearest hit on an axis-aligned box, inf where missed."""
    t = np.full(dx.shape, np.inf)
    lo = centroid - half
    hi = centroid + half
    tmin = np.full(dx.shape, -np.inf)
    tmax = np.full(dx.shape, np.inf)
    for d, lo_a, hi_a in ((dx, lo[0], hi[0]), (dy, lo[1], hi[1])):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo_a / d
            t2 = hi_a / d
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        parallel = np.abs(d) < 1e-15
        inside = (lo_a <= 0.0) & (0.0 <= hi_a)
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        tmin = np.maximum(tmin, near)
        tmax = np.minimum(tmax, far)
    tmin = np.maximum(tmin, lo[2])  # dz == 1
    tmax = np.minimum(tmax, hi[2])
    hit = (tmax >= tmin) & (tmax > 0)
    entry = np.where(tmin > 0, tmin, tmax)
    t[hit] = entry[hit]
    return t


GRAZE_EPS = 1e-12
GRAZE_NUDGE = 1e-9


def _intersect_sphere(dx, dy, centroid, radius, _depth=0) -> np.ndarray:
    a = dx * dx + dy * dy + 1.0
    b = -2.0 * (dx * centroid[0] + dy * centroid[1] + centroid[2])
    c = centroid @ centroid - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(dx.shape, np.inf)
    ok = disc > 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    t1 = (-b - root) / (2 * a)
    t2 = (-b + root) / (2 * a)
    best = np.where(t1 > 0, t1, np.where(t2 > 0, t2, np.inf))
    t[ok] = best[ok]
    # tangent rays are ill-conditioned: re-cast with a nudged direction
    graze = np.abs(disc) < GRAZE_EPS
    if graze.any() and _depth < 2:
        t[graze] = _intersect_sphere(
            dx[graze] + GRAZE_NUDGE, dy[graze], centroid, radius, _depth + 1
        )
    return t


def _intersect_cylinder(dx, dy, centroid, radius, half_h, _depth=0) -> np.ndarray:
    """Vertical-axis cylinder with caps."""
    a = dx * dx + dy * dy
    b = -2.0 * (dx * centroid[0] + dy * centroid[1])
    c = centroid[0] ** 2 + centroid[1] ** 2 - radius * radius
    z_lo, z_hi = centroid[2] - half_h, centroid[2] + half_h
    t = np.full(dx.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - 4 * a * c
        ok = (disc > 0) & (a > 1e-18)
        root = np.sqrt(np.where(ok, disc, 0.0))
        for sign in (-1.0, 1.0):
            ts = (-b + sign * root) / (2 * a)
            valid = ok & (ts > 0) & (ts >= z_lo) & (ts <= z_hi)  # z(t) == t
            t = np.where(valid & (ts < t), ts, t)
    for z_cap in (z_lo, z_hi):
        ts = np.full(dx.shape, z_cap)
        r2 = (ts * dx - centroid[0]) ** 2 + (ts * dy - centroid[1]) ** 2
        valid = (ts > 0) & (r2 <= radius * radius)
        t = np.where(valid & (ts < t), ts, t)
    graze = (np.abs(disc) < GRAZE_EPS) & (a > 1e-18)
    if graze.any() and _depth < 2:
        t[graze] = _intersect_cylinder(
            dx[graze] + GRAZE_NUDGE, dy[graze], centroid, radius, half_h, _depth + 1
        )
    return t


def _intersect_object(dx, dy, obj: ObjectRecord) -> np.ndarray:
    if obj.shape == "sphere":
        return _intersect_sphere(dx, dy, obj.centroid, obj.half_extents[0])
    if obj.shape == "cylinder":
        return _intersect_cylinder(
            dx, dy, obj.centroid, obj.half_extents[0], obj.half_extents[2]
        )
    return _intersect_box(dx, dy, obj.centroid, obj.half_extents)


def raycast(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Depth map (224, 224) and per-pixel owner (object index, -1 elsewhere)."""
    dx, dy = _ray_dirs(spec.intrinsics)
    depth = np.full(dx.shape, np.inf)
    owner = np.full(dx.shape, -1, dtype=np.int64)

    # table: finite square at z = table_height (dz == 1 so t == z there)
    t_tab = np.full(dx.shape, spec.table_height)
    on_table = (np.abs(t_tab * dx) <= spec.table_half) & (
        np.abs(t_tab * dy) <= spec.table_half
    )
    depth[on_table] = spec.table_height

    for i, obj in enumerate(spec.objects):
        t = _intersect_object(dx, dy, obj)
        closer = t < depth
        depth = np.where(closer, t, depth)
        owner = np.where(closer, i, owner)

    missed = ~np.isfinite(depth)
    depth[missed] = FAR_PLANE
    owner[missed] = -1
    return depth.reshape(IMAGE_SIZE, IMAGE_SIZE), owner.reshape(IMAGE_SIZE, IMAGE_SIZE)


# ---------------------------------------------------------------------------
# patch features
# ---------------------------------------------------------------------------


def _keyed_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def class_embedding(class_id: int) -> np.ndarray:
    return _keyed_rng(_CLASS_KEY, class_id).standard_normal(FEATURE_DIM) * 0.7


_RAMP = _keyed_rng(_RAMP_KEY).standard_normal((2, FEATURE_DIM)) * 0.35


def patch_owners(owner_px: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Majority owner of each 14 x 14 patch; ties go to the nearer object."""
    owners = np.full(GRID * GRID, -1, dtype=np.int64)
    blocks = owner_px.reshape(GRID, PATCH, GRID, PATCH).transpose(0, 2, 1, 3)
    dblocks = depth.reshape(GRID, PATCH, GRID, PATCH).transpose(0, 2, 1, 3)
    for gi in range(GRID):
        for gj in range(GRID):
            ids = blocks[gi, gj].ravel()
            ds = dblocks[gi, gj].ravel()
            obj_ids = ids[ids >= 0]
            if obj_ids.size == 0:
                continue
            counts = np.bincount(obj_ids)
            best = counts.max()
            cands = np.flatnonzero(counts == best)
            if cands.size > 1:  # tie: nearer object (smaller mean hit depth) wins
                means = [ds[ids == c].mean() for c in cands]
                pick = cands[int(np.argmin(means))]
            else:
                pick = cands[0]
            # the winning object must also beat the background pixel count
            n_bg = int((ids < 0).sum())
            owners[gi * GRID + gj] = pick if counts[pick] >= n_bg else -1
    return owners


def patch_features(spec: SceneSpec, owners: np.ndarray) -> np.ndarray:
    feats = np.empty((GRID * GRID, FEATURE_DIM))
    bg = class_embedding(_BACKGROUND_CLASS)
    for k in range(GRID * GRID):
        o = owners[k]
        feats[k] = bg if o < 0 else class_embedding(spec.objects[o].class_id)
    gy, gx = np.divmod(np.arange(GRID * GRID), GRID)
    ramp = (
        (gx / (GRID - 1) - 0.5)[:, None] * _RAMP[0]
        + (gy / (GRID - 1) - 0.5)[:, None] * _RAMP[1]
    )
    noise = _keyed_rng(spec.seed, 77).normal(0.0, FEATURE_NOISE, feats.shape)
    return feats + ramp + noise


# ---------------------------------------------------------------------------
# annotation and demonstration
# ---------------------------------------------------------------------------


def _tilt_rotvec(normal: np.ndarray) -> np.ndarray:
    """Rotation vector taking the down-pointing approach axis onto -normal."""
    z = np.array([0.0, 0.0, 1.0])
    target = -np.asarray(normal, dtype=np.float64)
    c = np.cross(z, target)
    s = np.linalg.norm(c)
    d = float(z @ target)
    if s < 1e-12:
        return np.zeros(3)
    angle = np.arctan2(s, d)
    return c / s * angle


def start_pose(spec: SceneSpec) -> np.ndarray:
    """Start pose (xyz + rotation vector + gripper): hovering near pre-grasp."""
    tgt = spec.objects[spec.target_index]
    pre = tgt.grasp_point + PRE_GRASP_CLEARANCE * tgt.grasp_normal
    rng = _keyed_rng(spec.seed, 55)
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    offset = v * START_OFFSET_RADIUS * rng.uniform() ** (1.0 / 3.0)
    return np.concatenate([pre + offset, np.zeros(3), [0.0]])


def waypoints(spec: SceneSpec) -> np.ndarray:
    """Pre-grasp, grasp, retract positions for the target object."""
    tgt = spec.objects[spec.target_index]
    pre = tgt.grasp_point + PRE_GRASP_CLEARANCE * tgt.grasp_normal
    grasp = tgt.grasp_point
    retract = grasp + RETRACT_CLEARANCE * TABLE_UP
    return np.stack([pre, grasp, retract])


def annotate(spec: SceneSpec) -> ThoughtChain:
    """The four thoughts as continuous values (pure function of the spec)."""
    spec.validate()
    tgt = spec.objects[spec.target_index]
    others = [o for i, o in enumerate(spec.objects) if i != spec.target_index]
    if others:
        lateral = min(
            float(np.linalg.norm((o.centroid - tgt.centroid)[:2])) for o in others
        )
    else:
        lateral = NO_NEIGHBOR_DISTANCE
    start = start_pose(spec)
    wps = waypoints(spec)
    tilt = _tilt_rotvec(tgt.grasp_normal)
    rots = np.stack([tilt, np.zeros(3), np.zeros(3)])
    prev = np.vstack([start[:3], wps[:-1]])
    deltas = np.concatenate([wps - prev, rots], axis=1)
    return ThoughtChain(
        centroid=tgt.centroid.copy(),
        grasp_offset=tgt.grasp_point - tgt.centroid,
        grasp_normal=tgt.grasp_normal.copy(),
        clearances=np.array([tgt.centroid[2] - spec.table_height, lateral]),
        waypoint_deltas=deltas,
    )


def _quintic(tau: np.ndarray) -> np.ndarray:
    return 10 * tau**3 - 15 * tau**4 + 6 * tau**5


def script_demo(spec: SceneSpec) -> np.ndarray:
    """A (CHUNK_LEN, 7) action chunk tracing start -> pre-grasp -> grasp ->
    retract with a global minimum-jerk arc-length profile.

    Columns: position delta (3), rotation-vector delta (3), absolute gripper.
    """
    start = start_pose(spec)
    wps = waypoints(spec)
    pts = np.vstack([start[:3], wps])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    arc_grasp = cum[2]  # through pre-grasp to grasp

    tau = np.arange(CHUNK_LEN + 1) / CHUNK_LEN
    arcs = _quintic(tau) * total
    positions = np.empty((CHUNK_LEN + 1, 3))
    for i, a in enumerate(arcs):
        j = min(int(np.searchsorted(cum, a, side="right")) - 1, len(seg) - 1)
        frac = 0.0 if seg[j] < 1e-15 else (a - cum[j]) / seg[j]
        positions[i] = pts[j] + np.clip(frac, 0.0, 1.0) * (pts[j + 1] - pts[j])
    pos_deltas = np.diff(positions, axis=0)

    tilt = _tilt_rotvec(spec.objects[spec.target_index].grasp_normal)
    progress = np.clip(arcs / max(arc_grasp, 1e-12), 0.0, 1.0)
    rot_deltas = np.diff(progress)[:, None] * tilt

    gripper = (arcs[1:] >= arc_grasp - 1e-12).astype(np.float64)

    step_pos = np.linalg.norm(pos_deltas, axis=1)
    step_rot = np.linalg.norm(rot_deltas, axis=1)
    if step_pos.max() > MAX_STEP_POS + 1e-12 or step_rot.max() > MAX_STEP_ROT + 1e-12:
        raise GenerationError(
            f"demo exceeds per-step limits: pos {step_pos.max():.4f} m, "
            f"rot {step_rot.max():.4f} rad"
        )
    if np.any(np.diff(gripper) < 0):
        raise GenerationError("gripper channel must be monotone")
    return np.concatenate([pos_deltas, rot_deltas, gripper[:, None]], axis=1)


# ---------------------------------------------------------------------------
# spec sampling
# ---------------------------------------------------------------------------


def _sample_object(rng: np.random.Generator, class_id: int, table_h: float) -> ObjectRecord:
    shape = SHAPES[class_id % len(SHAPES)]
    if shape == "sphere":
        r = rng.uniform(0.032, 0.05)
        half = np.array([r, r, r])
    elif shape == "cylinder":
        r = rng.uniform(0.03, 0.05)
        half = np.array([r, r, rng.uniform(0.015, 0.045)])
    elif shape == "thin_plate":
        half = np.array(
            [rng.uniform(0.035, 0.055), rng.uniform(0.035, 0.055), rng.uniform(0.005, 0.012)]
        )
    else:
        half = np.array(
            [rng.uniform(0.03, 0.055), rng.uniform(0.03, 0.055), rng.uniform(0.012, 0.045)]
        )
    cz = table_h - half[2]
    visible = table_h * (112.0 / 220.0)
    bound = visible - float(np.hypot(half[0], half[1])) - 0.02
    centroid = np.array([rng.uniform(-bound, bound), rng.uniform(-bound, bound), cz])

    if shape == "sphere":
        theta = rng.uniform(0.0, MAX_SPHERE_TILT)
        phi = rng.uniform(0.0, 2 * np.pi)
        n = np.array(
            [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), -np.cos(theta)]
        )
        grasp = centroid + half[0] * n
        normal = n
    elif shape == "cylinder":
        rho = rng.uniform(0.0, 0.7) * half[0]
        phi = rng.uniform(0.0, 2 * np.pi)
        grasp = centroid + np.array([rho * np.cos(phi), rho * np.sin(phi), -half[2]])
        normal = TABLE_UP.copy()
    else:
        u = rng.uniform(-0.6, 0.6, size=2)
        grasp = centroid + np.array([u[0] * half[0], u[1] * half[1], -half[2]])
        normal = TABLE_UP.copy()
    return ObjectRecord(shape, class_id, centroid, half, grasp, normal / np.linalg.norm(normal))


def sample_spec(seed: int) -> SceneSpec:
    """Draw a valid random scene; deterministic in the seed."""
    for attempt in range(64):
        rng = _keyed_rng(seed, attempt)
        table_h = rng.uniform(0.45, 0.60)
        n_obj = int(rng.integers(1, 6))
        class_ids = rng.permutation(vocab.N_CLASSES)[:n_obj]
        objects: list[ObjectRecord] = []
        ok = True
        for cid in class_ids:
            placed = None
            for _ in range(40):
                cand = _sample_object(rng, int(cid), table_h)
                r_c = float(np.hypot(*cand.half_extents[:2]))
                clear = all(
                    np.linalg.norm((cand.centroid - o.centroid)[:2])
                    > r_c + float(np.hypot(*o.half_extents[:2])) + 0.01
                    for o in objects
                )
                if clear:
                    placed = cand
                    break
            if placed is None:
                ok = False
                break
            objects.append(placed)
        if not ok:
            continue
        spec = SceneSpec(
            seed=seed,
            table_height=table_h,
            objects=objects,
            target_index=int(rng.integers(0, len(objects))),
            verb_id=int(rng.integers(0, vocab.N_VERBS)),
        )
        spec.validate()
        if _all_objects_own_patches(spec):
            return spec
    raise GenerationError(f"could not sample a valid scene for seed {seed}")


def _all_objects_own_patches(spec: SceneSpec) -> bool:
    depth, owner_px = raycast(spec)
    owners = patch_owners(owner_px, depth)
    present = set(owners[owners >= 0].tolist())
    return present == set(range(len(spec.objects)))


def generate(spec: SceneSpec) -> SceneSample:
    """Materialize a spec: depth, features, annotation, demo (all seeded)."""
    spec.validate()
    depth, owner_px = raycast(spec)
    owners = patch_owners(owner_px, depth)
    feats = patch_features(spec, owners)
    chain = annotate(spec)
    actions = script_demo(spec)
    return SceneSample(
        spec=spec,
        depth=depth,
        features=feats,
        patch_owner=owners,
        chain=chain,
        proprio=start_pose(spec),
        actions=actions,
    )


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------


def write_dataset(out_dir, count: int, seed: int, val_fraction: float = 0.0) -> dict:
    """Write scene files plus a manifest; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_val = int(round(count * val_fraction))
    entries = []
    for i in range(count):
        spec = sample_spec(seed * 100_003 + i)
        name = f"scene_{i:04d}.json"
        (out / name).write_text(spec.to_json())
        entries.append(
            {"path": name, "split": "val" if i >= count - n_val else "train", "seed": spec.seed}
        )
    manifest = {"format_version": 1, "seed": seed, "count": count, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(data_dir) -> list[tuple[Path, str]]:
    root = Path(data_dir)
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(mf.read_text())
    return [(root / e["path"], e["split"]) for e in manifest["scenes"]]


def load_scene(path) -> SceneSpec:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"scene file not found: {p}")
    return SceneSpec.from_json(p.read_text())


def load_split(data_dir, split: str) -> list[SceneSample]:
    return [
        generate(load_scene(p)) for p, s in load_manifest(data_dir) if s == split
    ]
