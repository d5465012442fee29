"""Data model for cell embeddings, batch metadata and FiLM adapters.

The adapter transform is a per-batch affine map in latent space:
``z_tilde = gamma[b] * z + beta[b]`` for a cell of batch ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class FedfilmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FedfilmError):
    """Shapes of embeddings / adapters do not line up."""


class MissingBatchError(FedfilmError):
    """A cell's batch has no corresponding adapter row."""


class ValidationError(FedfilmError):
    """Invalid value at construction time."""


def _as_readonly(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be at least 1x1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x d matrix of cell latent coordinates, row-aligned with cell ids."""

    cell_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        ids = tuple(str(c) for c in self.cell_ids)
        if len(set(ids)) != len(ids):
            dupes = sorted({c for c in ids if ids.count(c) > 1})
            raise ValidationError(f"duplicate cell ids: {dupes[:5]}")
        arr = _as_readonly(self.values, "embedding values")
        if arr.shape[0] != len(ids):
            raise ValidationError(
                f"{len(ids)} cell ids but {arr.shape[0]} matrix rows"
            )
        object.__setattr__(self, "cell_ids", ids)
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def rows_for(self, cell_ids) -> np.ndarray:
        """Row indices of the given cell ids, in the given order."""
        index = {c: i for i, c in enumerate(self.cell_ids)}
        try:
            return np.array([index[c] for c in cell_ids], dtype=np.intp)
        except KeyError as exc:
            raise ValidationError(f"unknown cell id {exc.args[0]!r}") from None

    def subset(self, cell_ids) -> "EmbeddingMatrix":
        rows = self.rows_for(cell_ids)
        return EmbeddingMatrix(tuple(cell_ids), self.values[rows])


@dataclass(frozen=True)
class CellMetadata:
    """Per-cell batch assignment and optional cell-type label.

    ``batch_names`` is the canonical batch order: first appearance in the
    cell order used at construction. All internal row indices derive from it.
    """

    batch_of: dict[str, str]
    label_of: dict[str, str] | None
    batch_names: tuple[str, ...]

    @classmethod
    def from_columns(cls, cell_ids, batches, labels=None) -> "CellMetadata":
        cell_ids = [str(c) for c in cell_ids]
        batches = [str(b) for b in batches]
        if len(cell_ids) != len(batches):
            raise ValidationError("cell_ids and batches differ in length")
        if len(set(cell_ids)) != len(cell_ids):
            raise ValidationError("duplicate cell ids in metadata")
        if not cell_ids:
            raise ValidationError("metadata must cover at least one cell")
        order: list[str] = []
        seen = set()
        for b in batches:
            if b not in seen:
                seen.add(b)
                order.append(b)
        batch_of = dict(zip(cell_ids, batches))
        label_of = None
        if labels is not None:
            labels = [str(l) for l in labels]
            if len(labels) != len(cell_ids):
                raise ValidationError("labels must cover all cells")
            label_of = dict(zip(cell_ids, labels))
        return cls(batch_of=batch_of, label_of=label_of, batch_names=tuple(order))

    def __post_init__(self):
        if not self.batch_of:
            raise ValidationError("metadata must cover at least one cell")
        seen = set(self.batch_of.values())
        if len(set(self.batch_names)) != len(self.batch_names):
            raise ValidationError("batch_names contains duplicates")
        if set(self.batch_names) != seen:
            raise ValidationError("batch_names do not match batches in batch_of")
        if self.label_of is not None and set(self.label_of) != set(self.batch_of):
            raise ValidationError("label map must cover exactly the cells with batches")

    @property
    def n_batches(self) -> int:
        return len(self.batch_names)

    def batch_sizes(self) -> dict[str, int]:
        sizes = {b: 0 for b in self.batch_names}
        for b in self.batch_of.values():
            sizes[b] += 1
        return sizes

    def batches_for(self, emb: EmbeddingMatrix) -> list[str]:
        """Batch name per embedding row; every cell must be covered."""
        out = []
        for c in emb.cell_ids:
            b = self.batch_of.get(c)
            if b is None:
                raise ValidationError(f"cell {c!r} has no batch assignment")
            out.append(b)
        return out

    def labels_for(self, emb: EmbeddingMatrix) -> list[str]:
        if self.label_of is None:
            raise ValidationError("metadata carries no cell-type labels")
        return [self.label_of[c] for c in emb.cell_ids]

    def restricted_to(self, cell_ids) -> "CellMetadata":
        """Sub-metadata for the given cells, with a fresh canonical batch order."""
        batches = []
        for c in cell_ids:
            if c not in self.batch_of:
                raise ValidationError(f"cell {c!r} has no batch assignment")
            batches.append(self.batch_of[c])
        labels = None
        if self.label_of is not None:
            labels = [self.label_of[c] for c in cell_ids]
        return CellMetadata.from_columns(list(cell_ids), batches, labels)


@dataclass(frozen=True)
class FilmAdapter:
    """Per-batch scale and shift tables; the global parameter state.

    Row order of ``gamma``/``beta`` follows ``batch_names``. ``frozen`` marks
    batches whose rows must never change (continual-training references).
    """

    batch_names: tuple[str, ...]
    gamma: np.ndarray
    beta: np.ndarray
    frozen: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        names = tuple(str(b) for b in self.batch_names)
        if len(set(names)) != len(names):
            raise ValidationError("adapter batch names contain duplicates")
        if not names:
            raise ValidationError("adapter needs at least one batch")
        gamma = _as_readonly(self.gamma, "gamma")
        beta = _as_readonly(self.beta, "beta")
        if gamma.shape != beta.shape:
            raise DimensionError(
                f"gamma {gamma.shape} and beta {beta.shape} differ in shape"
            )
        if gamma.shape[0] != len(names):
            raise DimensionError(
                f"{len(names)} batch names but {gamma.shape[0]} adapter rows"
            )
        frozen = tuple(bool(f) for f in self.frozen) if self.frozen else (False,) * len(names)
        if len(frozen) != len(names):
            raise ValidationError("frozen flags must match batch names")
        object.__setattr__(self, "batch_names", names)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "frozen", frozen)

    @property
    def n_batches(self) -> int:
        return len(self.batch_names)

    @property
    def d(self) -> int:
        return self.gamma.shape[1]

    def row_index(self, batch_name: str) -> int:
        try:
            return self.batch_names.index(batch_name)
        except ValueError:
            raise MissingBatchError(
                f"batch {batch_name!r} has no adapter row"
            ) from None

    def with_rows(self, updates: dict[str, tuple[np.ndarray, np.ndarray]]) -> "FilmAdapter":
        """New adapter with (gamma_row, beta_row) replaced for the named batches."""
        gamma = self.gamma.copy()
        beta = self.beta.copy()
        for name, (g, b) in updates.items():
            i = self.row_index(name)
            if self.frozen[i]:
                raise ValidationError(f"batch {name!r} is frozen")
            gamma[i] = g
            beta[i] = b
        return FilmAdapter(self.batch_names, gamma, beta, self.frozen)

    def with_new_batches(self, batch_names, d: int | None = None) -> "FilmAdapter":
        """Append identity-initialized, unfrozen rows for new batch names."""
        new = [str(b) for b in batch_names]
        for b in new:
            if b in self.batch_names:
                raise ValidationError(f"batch {b!r} already present in adapter")
        d = self.d if d is None else d
        if d != self.d:
            raise DimensionError("new rows must match adapter dimension")
        gamma = np.vstack([self.gamma, np.ones((len(new), d))])
        beta = np.vstack([self.beta, np.zeros((len(new), d))])
        return FilmAdapter(
            self.batch_names + tuple(new), gamma, beta,
            self.frozen + (False,) * len(new),
        )

    def freeze(self, batch_names) -> "FilmAdapter":
        flags = list(self.frozen)
        for b in batch_names:
            flags[self.row_index(b)] = True
        return FilmAdapter(self.batch_names, self.gamma, self.beta, tuple(flags))


def identity_adapter(batch_names, d: int) -> FilmAdapter:
    """Identity transform: gamma all ones, beta all zeros, nothing frozen."""
    names = tuple(str(b) for b in batch_names)
    if not names:
        raise ValidationError("need at least one batch name")
    if len(set(names)) != len(names):
        raise ValidationError("batch names contain duplicates")
    if d < 1:
        raise ValidationError(f"dimension must be >= 1, got {d}")
    return FilmAdapter(names, np.ones((len(names), d)), np.zeros((len(names), d)))


def batch_row_indices(emb: EmbeddingMatrix, meta: CellMetadata) -> dict[str, np.ndarray]:
    """Embedding row indices per batch, in canonical batch order."""
    batches = meta.batches_for(emb)
    out: dict[str, list[int]] = {b: [] for b in meta.batch_names}
    for i, b in enumerate(batches):
        out[b].append(i)
    return {b: np.array(rows, dtype=np.intp) for b, rows in out.items()}


def apply_adapter(emb: EmbeddingMatrix, meta: CellMetadata, adapter: FilmAdapter) -> EmbeddingMatrix:
    """Apply the per-batch affine transform to every cell.

    Returns a new matrix with the same cell ids and row order. Cells whose
    batch has no adapter row are a hard error, they are never passed through.
    """
    if adapter.d != emb.d:
        raise DimensionError(
            f"adapter dimension {adapter.d} does not match embedding dimension {emb.d}"
        )
    batches = meta.batches_for(emb)
    row_of = {b: i for i, b in enumerate(adapter.batch_names)}
    try:
        idx = np.array([row_of[b] for b in batches], dtype=np.intp)
    except KeyError as exc:
        raise MissingBatchError(f"batch {exc.args[0]!r} has no adapter row") from None
    out = adapter.gamma[idx] * emb.values + adapter.beta[idx]
    return EmbeddingMatrix(emb.cell_ids, out)
