"""Trajectory data model and ingestion.

Covers the ETH/UCY-style text format (one observation per line:
``frame_id pedestrian_id x y``), sliding-window scene extraction,
per-agent normalization into heading-aligned local frames, the 6-D
pairwise edge features used as the denoiser condition, and the
noise/masking perturbation harnesses.

Scenes store T_hist + T_fut frames densely; frame k=0 is the current
frame (storage index ``t_hist - 1``), history covers k <= 0 and the
observation mask marks which history frames are actually available.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mathutils import RngStream

__all__ = [
    "ParseError",
    "RawTrack",
    "TrajectoryScene",
    "SceneGraph",
    "Perturbation",
    "load_ethucy",
    "write_ethucy",
    "make_windows",
    "build_scene_graph",
    "apply_perturbation",
    "leave_one_out_split",
    "export_scene_csv",
    "load_scene_csv",
    "ETHUCY_SCENES",
]

ETHUCY_SCENES = ("eth", "hotel", "univ", "zara1", "zara2")

STATIONARY_EPS = 1e-6   # displacement below this means "no heading"
COINCIDENT_EPS = 1e-6   # agents closer than this share a position


class ParseError(ValueError):
    """Malformed input file; carries the 1-based offending line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class RawTrack:
    """One pedestrian's observations: frame ids (strictly increasing) + positions."""

    pedestrian_id: int
    frame_ids: np.ndarray   # (n,) int64
    positions: np.ndarray   # (n, 2) float64, meters

    def __post_init__(self):
        frames = np.asarray(self.frame_ids, dtype=np.int64)
        pos = np.asarray(self.positions, dtype=np.float64)
        if frames.ndim != 1 or pos.shape != (frames.size, 2):
            raise ValueError("frame_ids and positions shapes disagree")
        if frames.size and not (np.diff(frames) > 0).all():
            raise ValueError(
                f"pedestrian {self.pedestrian_id}: frame ids not strictly increasing"
            )
        if not np.isfinite(pos).all():
            raise ValueError(f"pedestrian {self.pedestrian_id}: non-finite position")
        object.__setattr__(self, "frame_ids", frames)
        object.__setattr__(self, "positions", pos)


@dataclass(frozen=True)
class TrajectoryScene:
    """One sliding window: dense per-agent positions over T_hist + T_fut frames.

    obs_mask has shape (n_agents, t_hist) and marks which history frames
    (k = -t_hist+1 .. 0) were observed; the current frame is always True.
    Storage stays dense regardless of the mask.
    """

    positions: np.ndarray          # (N, t_hist + t_fut, 2) meters, world frame
    t_hist: int
    t_fut: int
    obs_mask: np.ndarray           # (N, t_hist) bool
    noise_sigma: float = 0.0
    scene_id: str = ""
    ped_ids: tuple = ()

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        mask = np.asarray(self.obs_mask, dtype=bool)
        if self.t_hist < 1 or self.t_fut < 1:
            raise ValueError("t_hist and t_fut must be >= 1")
        t_full = self.t_hist + self.t_fut
        if pos.ndim != 3 or pos.shape[1] != t_full or pos.shape[2] != 2:
            raise ValueError(f"positions must be (N, {t_full}, 2), got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("scene needs at least one agent")
        if not np.isfinite(pos).all():
            raise ValueError("positions contain non-finite values")
        if mask.shape != (pos.shape[0], self.t_hist):
            raise ValueError(f"obs_mask must be (N, {self.t_hist}), got {mask.shape}")
        if not mask[:, -1].all():
            raise ValueError("current frame (k=0) must always be observed")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "obs_mask", mask)
        if self.ped_ids and len(self.ped_ids) != pos.shape[0]:
            raise ValueError("ped_ids length must match agent count")

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def t_full(self) -> int:
        return self.t_hist + self.t_fut

    @property
    def history(self) -> np.ndarray:
        """(N, t_hist, 2) frames k = -t_hist+1 .. 0."""
        return self.positions[:, : self.t_hist]

    @property
    def future(self) -> np.ndarray:
        """(N, t_fut, 2) frames k = 1 .. t_fut."""
        return self.positions[:, self.t_hist:]

    @property
    def current(self) -> np.ndarray:
        """(N, 2) positions at k = 0."""
        return self.positions[:, self.t_hist - 1]


@dataclass(frozen=True)
class SceneGraph:
    """Normalized node trajectories plus 6-D pairwise edges at the current frame.

    nodes[i] is agent i's trajectory translated so its current position is
    the origin and rotated by -heading_i. edges[i, j] is
    (d, r_x, r_y, theta, cos theta, sin theta): distance, unit direction to
    j in agent i's frame, and relative heading wrapped to (-pi, pi].
    origins/headings keep the world-frame anchors needed to undo the
    normalization.
    """

    nodes: np.ndarray       # (N, t_full, 2) agent-local frames
    edges: np.ndarray       # (N, N, 6)
    headings: np.ndarray    # (N,) radians, world frame
    origins: np.ndarray     # (N, 2) world-frame current positions
    t_hist: int
    t_fut: int

    @property
    def n_agents(self) -> int:
        return self.nodes.shape[0]


@dataclass(frozen=True)
class Perturbation:
    """Observation-degradation spec: Gaussian noise or random frame masking."""

    kind: str                   # "gaussian_noise" | "frame_mask"
    sigma: float = 0.0          # meters, gaussian_noise only
    missing_ratio: float = 0.0  # fraction of non-current history frames, frame_mask only
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_noise", "frame_mask"):
            raise ValueError(f"unknown perturbation kind: {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.missing_ratio < 1.0:
            raise ValueError("missing_ratio must lie in [0, 1)")


def load_ethucy(path) -> list[RawTrack]:
    """Parse an ETH/UCY-format text file into per-pedestrian tracks.

    Each non-empty line holds 4 whitespace-separated numbers:
    frame_id, pedestrian_id, x, y. Lines starting with '#' are ignored.
    Frame ids are kept as given (no resampling); tracks come back sorted
    by pedestrian id with frames ascending.
    """
    by_ped: dict[int, list[tuple[int, float, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 4:
                raise ParseError(
                    f"{path}: line {lineno}: expected 4 fields, got {len(fields)}",
                    line=lineno,
                )
            try:
                frame = int(round(float(fields[0])))
                ped = int(round(float(fields[1])))
                x = float(fields[2])
                y = float(fields[3])
            except ValueError as exc:
                raise ParseError(
                    f"{path}: line {lineno}: malformed number ({exc})", line=lineno
                ) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError(
                    f"{path}: line {lineno}: non-finite position", line=lineno
                )
            by_ped.setdefault(ped, []).append((frame, x, y))

    tracks = []
    for ped in sorted(by_ped):
        rows = sorted(by_ped[ped], key=lambda r: r[0])
        frames = np.array([r[0] for r in rows], dtype=np.int64)
        if np.unique(frames).size != frames.size:
            raise ParseError(f"{path}: pedestrian {ped} has duplicate frame ids")
        pos = np.array([[r[1], r[2]] for r in rows], dtype=np.float64)
        tracks.append(RawTrack(pedestrian_id=ped, frame_ids=frames, positions=pos))
    return tracks


def write_ethucy(scenes, path) -> None:
    """Emit scenes in the same text format load_ethucy consumes.

    Each scene occupies its own disjoint frame-id block, so re-windowing
    the file with stride 1 recovers exactly one scene per block. Floats are
    written with repr for a bit-exact round trip.
    """
    path = Path(path)
    lines = []
    ped_counter = 1
    base = 0
    for scene in scenes:
        for a in range(scene.n_agents):
            for f in range(scene.t_full):
                x, y = scene.positions[a, f]
                lines.append(
                    f"{base + 10 * f} {ped_counter} {float(x)!r} {float(y)!r}"
                )
            ped_counter += 1
        base += 10 * (scene.t_full + 2)
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def make_windows(tracks, t_hist: int = 8, t_fut: int = 12, stride: int = 1,
                 scene_prefix: str = "") -> list[TrajectoryScene]:
    """Slide a T_hist+T_fut window over the file's annotated frames.

    Window starts advance by ``stride`` positions in the sorted sequence of
    distinct frame ids. A scene is emitted for every window where at least
    one pedestrian is observed at all T_full frames, and contains exactly
    those fully-present pedestrians.
    """
    if t_hist < 1 or t_fut < 1:
        raise ValueError("t_hist and t_fut must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t_full = t_hist + t_fut
    all_frames = np.unique(np.concatenate([t.frame_ids for t in tracks])) if tracks else np.array([], dtype=np.int64)
    if all_frames.size < t_full:
        return []

    frame_pos = {}
    for track in tracks:
        frame_pos[track.pedestrian_id] = dict(
            zip(track.frame_ids.tolist(), track.positions)
        )

    scenes = []
    for start in range(0, all_frames.size - t_full + 1, stride):
        window = all_frames[start:start + t_full]
        agents = []
        ped_ids = []
        for track in tracks:
            lookup = frame_pos[track.pedestrian_id]
            rows = [lookup.get(int(f)) for f in window]
            if any(r is None for r in rows):
                continue
            agents.append(np.stack(rows))
            ped_ids.append(track.pedestrian_id)
        if not agents:
            continue
        scenes.append(TrajectoryScene(
            positions=np.stack(agents),
            t_hist=t_hist,
            t_fut=t_fut,
            obs_mask=np.ones((len(agents), t_hist), dtype=bool),
            scene_id=f"{scene_prefix}w{int(window[0]):06d}",
            ped_ids=tuple(ped_ids),
        ))
    return scenes


def _wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.arctan2(np.sin(theta), np.cos(theta))
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def agent_headings(scene: TrajectoryScene) -> np.ndarray:
    """World-frame heading per agent from the last observed displacement.

    heading_i = atan2(P_0 - P_{-1}); a stationary agent (displacement norm
    below STATIONARY_EPS) gets heading 0 (world +x).
    """
    cur = scene.positions[:, scene.t_hist - 1]
    prev = scene.positions[:, scene.t_hist - 2] if scene.t_hist >= 2 else cur
    delta = cur - prev
    norms = np.linalg.norm(delta, axis=1)
    headings = np.where(
        norms < STATIONARY_EPS, 0.0, np.arctan2(delta[:, 1], delta[:, 0])
    )
    return headings


def build_scene_graph(scene: TrajectoryScene) -> SceneGraph:
    """Normalize trajectories per agent and build the pairwise 6-D edges.

    Node trajectories are expressed in each agent's current-frame-centered,
    heading-aligned frame; edge features are computed from world-frame
    current positions/headings, which makes the whole representation
    invariant to rigid motions of the scene.
    """
    n = scene.n_agents
    headings = agent_headings(scene)
    origins = scene.current.copy()

    nodes = np.empty_like(scene.positions)
    for i in range(n):
        rot = _rotation(-headings[i])
        nodes[i] = (scene.positions[i] - origins[i]) @ rot.T

    edges = np.zeros((n, n, 6))
    offsets = origins[None, :, :] - origins[:, None, :]   # [i, j] = P_j - P_i
    dists = np.linalg.norm(offsets, axis=2)
    for i in range(n):
        rot_i = _rotation(-headings[i])
        for j in range(n):
            d = dists[i, j]
            if i == j or d < COINCIDENT_EPS:
                r = np.array([1.0, 0.0])
            else:
                r = rot_i @ (offsets[i, j] / d)
            theta = 0.0 if i == j else float(_wrap_angle(headings[j] - headings[i]))
            edges[i, j] = (d, r[0], r[1], theta, math.cos(theta), math.sin(theta))

    return SceneGraph(
        nodes=nodes,
        edges=edges,
        headings=headings,
        origins=origins,
        t_hist=scene.t_hist,
        t_fut=scene.t_fut,
    )


def apply_perturbation(scene: TrajectoryScene, p: Perturbation) -> TrajectoryScene:
    """Degrade the observed history; deterministic given the perturbation seed.

    gaussian_noise adds i.i.d. N(0, sigma^2) to every history coordinate
    (frames k <= 0), leaving the future untouched and recording sigma on the
    scene. frame_mask hides floor(ratio * (t_hist - 1)) uniformly chosen
    non-current history frames per agent; the current frame is never masked.
    """
    rng = RngStream(p.seed)
    if p.kind == "gaussian_noise":
        positions = scene.positions.copy()
        noise = rng.normal(0.0, p.sigma, (scene.n_agents, scene.t_hist, 2))
        positions[:, : scene.t_hist] += noise
        return dataclasses.replace(
            scene, positions=positions, noise_sigma=float(p.sigma)
        )

    mask = scene.obs_mask.copy()
    n_candidates = scene.t_hist - 1
    n_masked = int(p.missing_ratio * n_candidates)
    for a in range(scene.n_agents):
        if n_masked:
            drop = rng.choice(n_candidates, size=n_masked, replace=False)
            mask[a, drop] = False
    return dataclasses.replace(scene, obs_mask=mask)


def leave_one_out_split(holdout: str, names=ETHUCY_SCENES):
    """Train-on-four / test-on-one split keyed by scene name."""
    if holdout not in names:
        raise ValueError(f"unknown scene {holdout!r}; expected one of {names}")
    train = tuple(n for n in names if n != holdout)
    return train, holdout


def export_scene_csv(scene: TrajectoryScene, path) -> None:
    """Write a scene as CSV with header ``agent,frame,x,y,observed``.

    frame is the relative index k (history k <= 0, future k >= 1).
    observed reflects the history mask; future rows carry 0 since they are
    ground truth, not observations.
    """
    lines = ["agent,frame,x,y,observed"]
    for a in range(scene.n_agents):
        for idx in range(scene.t_full):
            k = idx - (scene.t_hist - 1)
            observed = int(scene.obs_mask[a, idx]) if idx < scene.t_hist else 0
            x, y = scene.positions[a, idx]
            lines.append(f"{a},{k},{float(x)!r},{float(y)!r},{observed}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_scene_csv(path, noise_sigma: float = 0.0,
                   scene_id: str = "") -> TrajectoryScene:
    """Inverse of export_scene_csv; infers t_hist/t_fut from the frame column."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "agent,frame,x,y,observed":
            raise ParseError(f"{path}: unexpected header {header!r}", line=1)
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 5:
                raise ParseError(f"{path}: line {lineno}: expected 5 fields", line=lineno)
            try:
                rows.append((int(fields[0]), int(fields[1]), float(fields[2]),
                             float(fields[3]), int(fields[4])))
            except ValueError as exc:
                raise ParseError(
                    f"{path}: line {lineno}: malformed field ({exc})", line=lineno
                ) from None
    if not rows:
        raise ParseError(f"{path}: no data rows")

    agents = sorted({r[0] for r in rows})
    ks = sorted({r[1] for r in rows})
    t_hist = sum(1 for k in ks if k <= 0)
    t_fut = len(ks) - t_hist
    positions = np.zeros((len(agents), len(ks), 2))
    mask = np.ones((len(agents), t_hist), dtype=bool)
    seen = set()
    a_index = {a: i for i, a in enumerate(agents)}
    k_index = {k: i for i, k in enumerate(ks)}
    for a, k, x, y, obs in rows:
        i, j = a_index[a], k_index[k]
        if (i, j) in seen:
            raise ParseError(f"{path}: duplicate (agent={a}, frame={k}) row")
        seen.add((i, j))
        positions[i, j] = (x, y)
        if k <= 0:
            mask[i, j] = bool(obs)
    if len(seen) != len(agents) * len(ks):
        raise ParseError(f"{path}: missing (agent, frame) combinations")
    if not scene_id:
        scene_id = Path(path).stem
    return TrajectoryScene(
        positions=positions, t_hist=t_hist, t_fut=t_fut, obs_mask=mask,
        noise_sigma=noise_sigma, scene_id=scene_id,
    )
