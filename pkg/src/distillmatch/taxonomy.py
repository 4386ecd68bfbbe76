"""Three-level class hierarchy (super-class > parent class > object class) and
the synthetic hierarchical Gaussian dataset generated from it."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import TaxonomyError


@dataclass(frozen=True)
class ParentClass:
    name: str
    class_ids: tuple[int, ...]


@dataclass(frozen=True)
class SuperClass:
    name: str
    parents: tuple[ParentClass, ...]


@dataclass(frozen=True)
class Taxonomy:
    """Ordered hierarchy of super-classes, parent classes and object-class ids.

    Object-class ids must form a permutation of 0..M-1 and each id/parent
    appears exactly once; both are validated at construction.
    """

    superclasses: tuple[SuperClass, ...]

    def __post_init__(self):
        seen_ids: set[int] = set()
        seen_parents: dict[str, str] = {}
        for sc in self.superclasses:
            for parent in sc.parents:
                if parent.name in seen_parents:
                    raise TaxonomyError(
                        f"parent class '{parent.name}' assigned to both "
                        f"'{seen_parents[parent.name]}' and '{sc.name}'"
                    )
                seen_parents[parent.name] = sc.name
                for cid in parent.class_ids:
                    if cid in seen_ids:
                        raise TaxonomyError(f"class id {cid} listed more than once")
                    seen_ids.add(cid)
        if not seen_ids:
            raise TaxonomyError("taxonomy defines no object classes")
        if seen_ids != set(range(len(seen_ids))):
            raise TaxonomyError(
                f"class ids must be a permutation of 0..{len(seen_ids) - 1}, "
                f"got {sorted(seen_ids)}"
            )

    @property
    def n_classes(self) -> int:
        return sum(len(p.class_ids) for sc in self.superclasses for p in sc.parents)

    @cached_property
    def parents(self) -> tuple[ParentClass, ...]:
        """All parent classes in file order, flattened across super-classes."""
        return tuple(p for sc in self.superclasses for p in sc.parents)

    @property
    def n_parents(self) -> int:
        return len(self.parents)

    @cached_property
    def _superclass_of_parent(self) -> dict[frozenset, int]:
        table = {}
        for si, sc in enumerate(self.superclasses):
            for parent in sc.parents:
                table[frozenset(parent.class_ids)] = si
        return table

    def superclass_index_of_task(self, task_classes) -> int:
        """Super-class index of the parent whose class set equals the task.

        Raises :class:`TaxonomyError` when the task is not exactly one parent
        class, which is the case for randomly partitioned tasks.
        """
        key = frozenset(int(c) for c in task_classes)
        try:
            return self._superclass_of_parent[key]
        except KeyError:
            raise TaxonomyError(
                "task classes do not coincide with a single parent class"
            ) from None

    def classes_of_superclass(self, super_index: int) -> tuple[int, ...]:
        sc = self.superclasses[super_index]
        return tuple(sorted(c for p in sc.parents for c in p.class_ids))

    @cached_property
    def all_class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(c for p in self.parents for c in p.class_ids))

    def canonical_text(self) -> str:
        lines = []
        for sc in self.superclasses:
            for parent in sc.parents:
                for cid in parent.class_ids:
                    lines.append(f"{sc.name},{parent.name},{cid}")
        return "\n".join(lines) + "\n"

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def load_taxonomy(path) -> Taxonomy:
    """Parse a taxonomy file.

    One object class per line as ``superclass_name,parentclass_name,class_id``;
    ``#`` starts a comment line. Ordering in the file is preserved.
    """
    text = Path(path).read_text(encoding="utf-8")
    supers: list[str] = []
    parents_of: dict[str, list[str]] = {}
    classes_of: dict[str, list[int]] = {}
    super_of_parent: dict[str, str] = {}
    n_entries = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise TaxonomyError(
                f"line {lineno}: expected 'superclass,parentclass,class_id', got {raw!r}"
            )
        sname, pname, cid_text = parts
        if not sname or not pname:
            raise TaxonomyError(f"line {lineno}: empty super-class or parent-class name")
        try:
            cid = int(cid_text)
        except ValueError:
            raise TaxonomyError(f"line {lineno}: class id {cid_text!r} is not an integer") from None
        if pname in super_of_parent and super_of_parent[pname] != sname:
            raise TaxonomyError(
                f"parent class '{pname}' assigned to both "
                f"'{super_of_parent[pname]}' and '{sname}'"
            )
        if sname not in parents_of:
            supers.append(sname)
            parents_of[sname] = []
        if pname not in classes_of:
            parents_of[sname].append(pname)
            classes_of[pname] = []
            super_of_parent[pname] = sname
        classes_of[pname].append(cid)
        n_entries += 1
    if n_entries == 0:
        raise TaxonomyError(f"taxonomy file {path} has no class entries")
    return Taxonomy(
        superclasses=tuple(
            SuperClass(
                name=sname,
                parents=tuple(
                    ParentClass(name=pname, class_ids=tuple(classes_of[pname]))
                    for pname in parents_of[sname]
                ),
            )
            for sname in supers
        )
    )


def save_taxonomy(taxonomy: Taxonomy, path) -> None:
    Path(path).write_text(taxonomy.canonical_text(), encoding="utf-8")


def cifar_layout_path() -> Path:
    """Path of the bundled 8-super/20-parent/100-class layout file."""
    return Path(str(resources.files("distillmatch") / "data" / "cifar_layout.taxonomy"))


def load_cifar_layout() -> Taxonomy:
    return load_taxonomy(cifar_layout_path())


@dataclass
class Dataset:
    """Feature vectors with object-class labels and disjoint train/test splits.

    Treated as immutable after construction; index caches are built lazily.
    """

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    dim: int
    n_classes: int
    class_centers: np.ndarray | None = None
    _train_index: dict = field(default_factory=dict, repr=False)
    _test_index: dict = field(default_factory=dict, repr=False)

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_test(self) -> int:
        return len(self.y_test)

    def train_indices_for(self, classes) -> np.ndarray:
        """Indices of train examples whose label is in ``classes`` (cached)."""
        key = tuple(sorted(int(c) for c in classes))
        if key not in self._train_index:
            self._train_index[key] = np.flatnonzero(np.isin(self.y_train, key))
        return self._train_index[key]

    def test_indices_for(self, classes) -> np.ndarray:
        key = tuple(sorted(int(c) for c in classes))
        if key not in self._test_index:
            self._test_index[key] = np.flatnonzero(np.isin(self.y_test, key))
        return self._test_index[key]

    def per_class_counts(self, split: str = "train") -> dict[int, int]:
        y = self.y_train if split == "train" else self.y_test
        ids, counts = np.unique(y, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x_train, self.y_train, self.x_test, self.y_test):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def synthetic_dataset(
    taxonomy: Taxonomy,
    per_class_train: int,
    per_class_test: int,
    dim: int,
    seed: int,
    super_radius: float = 10.0,
    parent_radius: float = 3.0,
    class_radius: float = 1.0,
) -> Dataset:
    """Isotropic unit-variance Gaussian cluster per object class.

    Cluster centers follow the hierarchy: super-class centers sit on a sphere
    of ``super_radius``, parent centers are displaced ``parent_radius`` from
    their super-class center, class centers ``class_radius`` from their parent
    center. Sibling classes therefore overlap heavily while classes from
    different super-classes are well separated. Deterministic per seed.
    """
    if per_class_train < 1 or per_class_test < 1:
        raise ValueError("per-class counts must be >= 1")
    if dim < 2:
        raise ValueError("feature dimension must be >= 2")
    rng = np.random.default_rng(seed)
    centers = np.zeros((taxonomy.n_classes, dim))
    for sc in taxonomy.superclasses:
        s_center = super_radius * _random_unit(rng, dim)
        for parent in sc.parents:
            p_center = s_center + parent_radius * _random_unit(rng, dim)
            for cid in parent.class_ids:
                centers[cid] = p_center + class_radius * _random_unit(rng, dim)

    x_train, y_train, x_test, y_test = [], [], [], []
    for sc in taxonomy.superclasses:
        for parent in sc.parents:
            for cid in parent.class_ids:
                x_train.append(centers[cid] + rng.standard_normal((per_class_train, dim)))
                y_train.append(np.full(per_class_train, cid, dtype=np.int64))
                x_test.append(centers[cid] + rng.standard_normal((per_class_test, dim)))
                y_test.append(np.full(per_class_test, cid, dtype=np.int64))
    return Dataset(
        x_train=np.concatenate(x_train),
        y_train=np.concatenate(y_train),
        x_test=np.concatenate(x_test),
        y_test=np.concatenate(y_test),
        dim=dim,
        n_classes=taxonomy.n_classes,
        class_centers=centers,
    )
