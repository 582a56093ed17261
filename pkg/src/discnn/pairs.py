"""Turn capture metadata into pose-transformation-labeled training pairs.

A camera-pair is a fixed geometric relation between two capture viewpoints:
either a grid relation (camera/rotation offsets on a turntable, optionally
anchored at one camera) or a video relation (a frame gap within a numbered
sequence). An ordered list of such relations is the label space: a pair of
shots gets the list position of the relation it satisfies.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DataError

__all__ = [
    "TurntableShot",
    "ViewpointGrid",
    "GridRelation",
    "VideoRelation",
    "CameraPairSet",
    "PairedExample",
    "SingleExample",
    "SplitSpec",
    "GRID_PRESETS",
    "enumerate_grid_pairs",
    "enumerate_video_pairs",
    "generate_pairs",
    "left_image_set",
    "split_instances",
    "scale_image",
    "scale_pair",
    "write_shot_manifest",
    "read_shot_manifest",
    "write_pair_manifest",
    "read_pair_manifest",
    "SHOT_FIELDS",
]


@dataclass(frozen=True)
class TurntableShot:
    """Metadata of one captured image."""

    instance_id: str
    category_id: int
    camera_index: int
    rotation_index: int
    sequence_id: int = 0
    frame_index: int = 0
    lighting: int = 0
    focus: int = 0
    image_path: str = ""

    def key(self) -> tuple:
        """Uniqueness key within a dataset (everything but the path)."""
        return (
            self.instance_id,
            self.camera_index,
            self.rotation_index,
            self.sequence_id,
            self.frame_index,
            self.lighting,
            self.focus,
        )


@dataclass(frozen=True)
class ViewpointGrid:
    num_cameras: int
    num_rotations: int
    rotation_wraps: bool = False

    def __post_init__(self):
        if self.num_cameras < 1 or self.num_rotations < 1:
            raise ValueError("grid needs at least one camera and one rotation")


@dataclass(frozen=True)
class GridRelation:
    """(camera, rotation) offset between the two shots of a pair.

    ``camera`` anchors the relation at one left-camera index; None means the
    relation applies at any camera and all its pairs share one label.
    """

    cam_offset: int
    rot_offset: int
    camera: Optional[int] = None

    def describe(self) -> str:
        anchor = f"C{self.camera}" if self.camera is not None else "C*"
        return f"{anchor}:dc{self.cam_offset:+d},dr{self.rot_offset:+d}"


@dataclass(frozen=True)
class VideoRelation:
    """Frame gap ``delta`` within one sequence; one (delta, sequence) = one label."""

    delta: int
    sequence_id: int

    def describe(self) -> str:
        return f"S{self.sequence_id}:d{self.delta}"


Relation = Union[GridRelation, VideoRelation]


@dataclass(frozen=True)
class CameraPairSet:
    """Ordered relations; a pair's label is its matching relation's position."""

    relations: tuple[Relation, ...]
    grid: Optional[ViewpointGrid] = None

    def __post_init__(self):
        if not self.relations:
            raise ValueError("camera-pair set must hold at least one relation")
        kinds = {type(r) for r in self.relations}
        if len(kinds) != 1:
            raise ValueError("camera-pair set cannot mix grid and video relations")
        if isinstance(self.relations[0], GridRelation):
            if self.grid is None:
                raise ValueError("grid relations need a ViewpointGrid")
            for rel in self.relations:
                self._check_fits(rel)
            for i, a in enumerate(self.relations):
                for b in self.relations[i + 1 :]:
                    if self._co_matchable(a, b):
                        raise ValueError(
                            f"relations {a.describe()} and {b.describe()} can match the same pair"
                        )
        else:
            if len(set(self.relations)) != len(self.relations):
                raise ValueError("duplicate video relation")

    def _norm_rot(self, r: int) -> int:
        assert self.grid is not None
        return r % self.grid.num_rotations if self.grid.rotation_wraps else r

    def _check_fits(self, rel: GridRelation) -> None:
        grid = self.grid
        assert grid is not None
        if abs(rel.cam_offset) >= grid.num_cameras:
            raise ValueError(f"relation {rel.describe()} exceeds the {grid.num_cameras}-camera span")
        if rel.camera is not None and not (
            0 <= rel.camera < grid.num_cameras and 0 <= rel.camera + rel.cam_offset < grid.num_cameras
        ):
            raise ValueError(f"relation {rel.describe()} is anchored outside the camera span")
        if not grid.rotation_wraps and abs(rel.rot_offset) >= grid.num_rotations:
            raise ValueError(
                f"relation {rel.describe()} exceeds the non-wrapping {grid.num_rotations}-rotation span"
            )

    def _co_matchable(self, a: GridRelation, b: GridRelation) -> bool:
        if a.cam_offset != b.cam_offset or self._norm_rot(a.rot_offset) != self._norm_rot(b.rot_offset):
            return False
        return a.camera is None or b.camera is None or a.camera == b.camera

    def __len__(self) -> int:
        return len(self.relations)

    def label_of(self, left: TurntableShot, right: TurntableShot) -> Optional[int]:
        """Label index the (left, right) shot pair satisfies, or None.

        Pairs must share the instance and all non-viewpoint metadata.
        """
        if left.instance_id != right.instance_id:
            return None
        if (left.lighting, left.focus) != (right.lighting, right.focus):
            return None
        if isinstance(self.relations[0], GridRelation):
            if left.sequence_id != right.sequence_id:
                return None
            dc = right.camera_index - left.camera_index
            dr = self._norm_rot(right.rotation_index - left.rotation_index)
            for i, rel in enumerate(self.relations):
                assert isinstance(rel, GridRelation)
                if (
                    rel.cam_offset == dc
                    and self._norm_rot(rel.rot_offset) == dr
                    and (rel.camera is None or rel.camera == left.camera_index)
                ):
                    return i
            return None
        if left.sequence_id != right.sequence_id:
            return None
        gap = right.frame_index - left.frame_index
        for i, rel in enumerate(self.relations):
            assert isinstance(rel, VideoRelation)
            if rel.sequence_id == left.sequence_id and rel.delta == gap:
                return i
        return None


@dataclass(frozen=True)
class PairedExample:
    left: TurntableShot
    right: TurntableShot
    pose_label: int
    category_label: Optional[int] = None

    def __post_init__(self):
        if self.left.instance_id != self.right.instance_id:
            raise ValueError("a pair must show one object instance")


@dataclass(frozen=True)
class SingleExample:
    shot: TurntableShot
    category_label: int


@dataclass(frozen=True)
class SplitSpec:
    train_instance_ids: frozenset[str]
    test_instance_ids: frozenset[str]
    seed: int
    train_fraction: float

    def __post_init__(self):
        if self.train_instance_ids & self.test_instance_ids:
            raise ValueError("train and test instances overlap")


# -- camera-pair enumeration -------------------------------------------------


def _ilab_case1(grid: ViewpointGrid) -> list[GridRelation]:
    # Skip-one camera pairs (Ci, Ci+2). The published label count is 7, which
    # on 11 cameras means the first 7 of the 9 possible skip pairs.
    count = min(7, grid.num_cameras - 2)
    if count < 1:
        raise ValueError(f"grid with {grid.num_cameras} cameras has no skip-one camera pair")
    return [GridRelation(cam_offset=2, rot_offset=0, camera=i) for i in range(count)]


def _ilab_case2(grid: ViewpointGrid) -> list[GridRelation]:
    # One label per camera: that camera under two adjacent rotations.
    return [GridRelation(cam_offset=0, rot_offset=1, camera=i) for i in range(grid.num_cameras)]


def _ilab_case3(grid: ViewpointGrid) -> list[GridRelation]:
    return _ilab_case1(grid) + _ilab_case2(grid)


def _ilab_case4(grid: ViewpointGrid) -> list[GridRelation]:
    # Case 3 plus diagonal pairs; membership is frozen in a fixture file so
    # the 56-label space is versioned rather than re-derived.
    data = json.loads(
        resources.files("discnn.fixtures").joinpath("ilab_case4.json").read_text("utf-8")
    )
    if grid.num_cameras != data["num_cameras"] or grid.num_rotations != data["num_rotations"]:
        raise ValueError(
            f"preset ilab-case4 is frozen for an {data['num_cameras']}x{data['num_rotations']} grid, "
            f"got {grid.num_cameras}x{grid.num_rotations}"
        )
    return [
        GridRelation(cam_offset=r["cam_offset"], rot_offset=r["rot_offset"], camera=r["camera"])
        for r in data["relations"]
    ]


def _desk_relations(offsets: Sequence[tuple[int, int]]) -> list[GridRelation]:
    return [GridRelation(cam_offset=dc, rot_offset=dr) for dc, dr in offsets]


GRID_PRESETS = {
    "ilab-case1": _ilab_case1,
    "ilab-case2": _ilab_case2,
    "ilab-case3": _ilab_case3,
    "ilab-case4": _ilab_case4,
    # Desk presets keep offsets visually far apart (a one-step rotation, a
    # four-step rotation, a four-camera sweep, ...): at 32 pixels the label
    # must be readable from the image pair for the auxiliary task to train.
    "desk-3rel": lambda grid: _desk_relations([(0, 1), (0, 4), (4, 0)]),
    "desk-6rel": lambda grid: _desk_relations(
        [(0, 1), (0, 2), (0, 4), (2, 0), (4, 0), (2, 2)]
    ),
}


def enumerate_grid_pairs(
    grid: ViewpointGrid,
    preset: Optional[str] = None,
    relations: Optional[Iterable[GridRelation]] = None,
) -> CameraPairSet:
    """Build the label space from a named preset or an explicit relation list."""
    if (preset is None) == (relations is None):
        raise ValueError("pass exactly one of preset= or relations=")
    if preset is not None:
        if preset not in GRID_PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(GRID_PRESETS)}")
        rels = GRID_PRESETS[preset](grid)
    else:
        rels = list(relations)  # type: ignore[arg-type]
    return CameraPairSet(tuple(rels), grid=grid)


def enumerate_video_pairs(
    sequences: Sequence[tuple[int, int]], delta_set: Sequence[int]
) -> CameraPairSet:
    """One label per (frame gap, sequence): |delta_set| * |sequences| labels.

    ``sequences`` is a list of (sequence_id, frame_count).
    """
    if not delta_set:
        raise ValueError("delta set is empty")
    for delta in delta_set:
        if delta <= 0:
            raise ValueError(f"frame gap must be positive, got {delta}")
        if all(length <= delta for _, length in sequences):
            raise ValueError(f"frame gap {delta} is larger than every sequence")
    rels = [
        VideoRelation(delta=delta, sequence_id=seq_id)
        for delta in delta_set
        for seq_id, _ in sequences
    ]
    return CameraPairSet(tuple(rels))


# -- pair generation ----------------------------------------------------------


def _pair_sort_key(pair: PairedExample):
    return (
        pair.left.instance_id,
        pair.pose_label,
        pair.left.sequence_id,
        pair.left.camera_index,
        pair.left.rotation_index,
        pair.left.frame_index,
    )


def generate_pairs(
    shots: Sequence[TurntableShot],
    pair_set: CameraPairSet,
    split: Optional[SplitSpec] = None,
    subsample_every_n: Optional[int] = None,
    with_category: bool = True,
) -> list[PairedExample]:
    """All shot pairs that share an instance, lie in the training split, and
    satisfy exactly one relation; deterministically ordered.

    Turntable (grid) inputs must already be filtered to one lighting and one
    focus level. ``subsample_every_n`` keeps every n-th frame of video data
    before pairing.
    """
    grid_mode = isinstance(pair_set.relations[0], GridRelation)
    if grid_mode:
        lightings = {s.lighting for s in shots}
        focuses = {s.focus for s in shots}
        if len(lightings) > 1 or len(focuses) > 1:
            raise DataError(
                f"turntable pairing expects one lighting and one focus level, "
                f"got lightings {sorted(lightings)} and focuses {sorted(focuses)}"
            )
    if split is not None:
        shots = [s for s in shots if s.instance_id in split.train_instance_ids]
    if subsample_every_n is not None:
        if subsample_every_n < 1:
            raise ValueError("subsample_every_n must be >= 1")
        shots = [s for s in shots if s.frame_index % subsample_every_n == 0]

    by_group: dict[tuple, dict[tuple, TurntableShot]] = {}
    for shot in shots:
        group = (shot.instance_id, shot.sequence_id, shot.lighting, shot.focus)
        coord = (
            (shot.camera_index, shot.rotation_index) if grid_mode else (shot.frame_index,)
        )
        slot = by_group.setdefault(group, {})
        if coord in slot:
            raise DataError(f"duplicate shot at {group + coord}")
        slot[coord] = shot

    pairs: list[PairedExample] = []
    for group, members in by_group.items():
        for coord, left in members.items():
            for label, rel in enumerate(pair_set.relations):
                if grid_mode:
                    assert isinstance(rel, GridRelation)
                    if rel.camera is not None and rel.camera != left.camera_index:
                        continue
                    cam = left.camera_index + rel.cam_offset
                    rot = left.rotation_index + rel.rot_offset
                    grid = pair_set.grid
                    assert grid is not None
                    if not 0 <= cam < grid.num_cameras:
                        continue
                    if grid.rotation_wraps:
                        rot %= grid.num_rotations
                    elif not 0 <= rot < grid.num_rotations:
                        continue
                    right = members.get((cam, rot))
                else:
                    assert isinstance(rel, VideoRelation)
                    if rel.sequence_id != left.sequence_id:
                        continue
                    right = members.get((left.frame_index + rel.delta,))
                if right is None:
                    continue
                check = pair_set.label_of(left, right)
                if check != label:
                    raise DataError(
                        f"ambiguous label space: pair at {coord} matches relations "
                        f"{label} and {check}"
                    )
                pairs.append(
                    PairedExample(
                        left=left,
                        right=right,
                        pose_label=label,
                        category_label=left.category_id if with_category else None,
                    )
                )
    pairs.sort(key=_pair_sort_key)
    if not pairs:
        warnings.warn("pair generation produced no pairs", stacklevel=2)
    return pairs


def left_image_set(pairs: Sequence[PairedExample]) -> list[SingleExample]:
    """One single-image example per pair, duplicates preserved, same order."""
    return [
        SingleExample(
            shot=p.left,
            category_label=p.category_label if p.category_label is not None else p.left.category_id,
        )
        for p in pairs
    ]


def split_instances(
    shots: Sequence[TurntableShot], train_fraction: float, seed: int
) -> SplitSpec:
    """Stratified instance split: per category, floor(fraction * n) instances
    train and the rest test, with at least one test instance."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_category: dict[int, set[str]] = {}
    category_of: dict[str, int] = {}
    for shot in shots:
        prev = category_of.setdefault(shot.instance_id, shot.category_id)
        if prev != shot.category_id:
            raise DataError(f"instance {shot.instance_id!r} appears in two categories")
        by_category.setdefault(shot.category_id, set()).add(shot.instance_id)
    rng = np.random.default_rng(seed)
    train: set[str] = set()
    test: set[str] = set()
    for category in sorted(by_category):
        instances = sorted(by_category[category])
        if len(instances) < 2:
            raise DataError(
                f"category {category} has {len(instances)} instance(s); need at least 2 to split"
            )
        order = rng.permutation(len(instances))
        n_train = min(int(train_fraction * len(instances)), len(instances) - 1)
        for pos, idx in enumerate(order):
            (train if pos < n_train else test).add(instances[idx])
    return SplitSpec(frozenset(train), frozenset(test), seed, train_fraction)


# -- scale augmentation --------------------------------------------------------


def scale_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbor rescale about the center, resampled back to the
    original height and width (edge pixels extend past the border)."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    if factor == 1.0:
        return image.copy()
    h, w = image.shape[-2:]
    ys = np.clip(np.round((np.arange(h) - (h - 1) / 2) / factor + (h - 1) / 2), 0, h - 1).astype(int)
    xs = np.clip(np.round((np.arange(w) - (w - 1) / 2) / factor + (w - 1) / 2), 0, w - 1).astype(int)
    return image[..., ys[:, None], xs[None, :]]


def scale_pair(
    pair: PairedExample,
    left_image: np.ndarray,
    right_image: np.ndarray,
    factor_left: float,
    factor_right: float,
) -> tuple[PairedExample, np.ndarray, np.ndarray]:
    """Rescale the pair's image content; the labels are metadata and unchanged."""
    return pair, scale_image(left_image, factor_left), scale_image(right_image, factor_right)


# -- manifests ------------------------------------------------------------------

SHOT_FIELDS = (
    "instance_id",
    "category_id",
    "camera_index",
    "rotation_index",
    "sequence_id",
    "frame_index",
    "lighting",
    "focus",
    "image_path",
)


def write_shot_manifest(path, shots: Sequence[TurntableShot]) -> None:
    """One tab-separated shot per line, fields in SHOT_FIELDS order."""
    seen = set()
    lines = []
    for shot in shots:
        if shot.key() in seen:
            raise DataError(f"duplicate shot {shot.key()} in manifest")
        seen.add(shot.key())
        lines.append("\t".join(str(getattr(shot, f)) for f in SHOT_FIELDS))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_shot_manifest(path) -> list[TurntableShot]:
    shots = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(SHOT_FIELDS):
                raise DataError(f"{path}:{lineno}: expected {len(SHOT_FIELDS)} fields, got {len(parts)}")
            try:
                shots.append(
                    TurntableShot(
                        instance_id=parts[0],
                        category_id=int(parts[1]),
                        camera_index=int(parts[2]),
                        rotation_index=int(parts[3]),
                        sequence_id=int(parts[4]),
                        frame_index=int(parts[5]),
                        lighting=int(parts[6]),
                        focus=int(parts[7]),
                        image_path=parts[8],
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return shots


def write_pair_manifest(path, pairs: Sequence[PairedExample], shots: Sequence[TurntableShot]) -> None:
    """Pairs as left/right shot line indices plus labels."""
    index = {shot.key(): i for i, shot in enumerate(shots)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            try:
                li, ri = index[pair.left.key()], index[pair.right.key()]
            except KeyError as exc:
                raise DataError(f"pair references a shot missing from the manifest: {exc}") from None
            cat = "" if pair.category_label is None else str(pair.category_label)
            fh.write(f"{li}\t{ri}\t{pair.pose_label}\t{cat}\n")


def read_pair_manifest(path, shots: Sequence[TurntableShot]) -> list[PairedExample]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            li, ri, label = int(parts[0]), int(parts[1]), int(parts[2])
            if not (0 <= li < len(shots) and 0 <= ri < len(shots)):
                raise DataError(f"{path}:{lineno}: shot index out of range")
            pairs.append(
                PairedExample(
                    left=shots[li],
                    right=shots[ri],
                    pose_label=label,
                    category_label=int(parts[3]) if parts[3] else None,
                )
            )
    return pairs
