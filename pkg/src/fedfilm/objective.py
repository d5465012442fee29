"""Per-client local objective, analytic gradient and Adam-based local training.

For a client owning batch ``b`` with cells ``z_i`` the local objective is

    mean_i || gamma_b * z_i + beta_b - z_i ||^2
    + mu * (||gamma_b - gamma_b0||^2 + ||beta_b - beta_b0||^2)
    + l2  * (||gamma||_F^2 + ||beta||_F^2)

where ``(gamma_b0, beta_b0)`` is the global adapter state at the start of the
current round (the proximal anchor) and the last term runs over the full
tables of all batches. During local optimization only the client's own rows
move; every other row is held fixed, so its l2 contribution is a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DimensionError, FilmAdapter, ValidationError

# Stream tags keep the train/holdout split and the mini-batch shuffles on
# independent deterministic substreams of the run seed.
_SPLIT_STREAM = 101
_SHUFFLE_STREAM = 202


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the federated fitting protocol.

    Defaults follow the reference protocol: Adam at 1e-3 for two local epochs
    per round, seven rounds, proximal and l2 coefficients 1e-3, mini-batches
    of 256 cells and a fixed 90 percent training split per client.
    """

    mu: float = 1e-3
    lam: float = 1e-3
    learning_rate: float = 1e-3
    local_epochs: int = 2
    rounds: int = 7
    minibatch_size: int = 256
    train_fraction: float = 0.9
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    reset_moments_per_round: bool = False

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValidationError("mu and lambda must be >= 0")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.local_epochs < 1:
            raise ValidationError("local_epochs must be >= 1")
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if self.minibatch_size < 1:
            raise ValidationError("minibatch_size must be >= 1")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ValidationError("train_fraction must be in [0, 1]")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValidationError("adam betas must be in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ValidationError("adam_epsilon must be > 0")


class ClientEmptyError(ValidationError):
    """A client ended up with zero training cells after the split."""


@dataclass
class ClientState:
    """One batch's optimization unit.

    The training split is drawn once from (seed, batch index) and reused for
    every round; Adam moment tables persist across rounds unless the config
    says otherwise.
    """

    batch_name: str
    batch_index: int
    train_indices: np.ndarray
    holdout_indices: np.ndarray
    m_gamma: np.ndarray = field(repr=False, default=None)
    v_gamma: np.ndarray = field(repr=False, default=None)
    m_beta: np.ndarray = field(repr=False, default=None)
    v_beta: np.ndarray = field(repr=False, default=None)
    step: int = 0

    def reset_moments(self, d: int):
        self.m_gamma = np.zeros(d)
        self.v_gamma = np.zeros(d)
        self.m_beta = np.zeros(d)
        self.v_beta = np.zeros(d)
        self.step = 0


def make_client_state(batch_name: str, batch_index: int, n_cells: int, d: int,
                      cfg: TrainConfig) -> ClientState:
    """Draw the fixed train/holdout split and zero the Adam moments."""
    if n_cells < 1:
        raise ClientEmptyError(f"client {batch_name!r} has no cells")
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM, batch_index])
    perm = rng.permutation(n_cells)
    n_train = int(round(cfg.train_fraction * n_cells))
    if n_train == 0:
        raise ClientEmptyError(
            f"client {batch_name!r} has zero training cells after the "
            f"{cfg.train_fraction:.0%} split"
        )
    state = ClientState(
        batch_name=batch_name,
        batch_index=batch_index,
        train_indices=np.sort(perm[:n_train]),
        holdout_indices=np.sort(perm[n_train:]),
    )
    state.reset_moments(d)
    return state


def _check_vectors(cells, *vectors):
    cells = np.asarray(cells, dtype=np.float64)
    if cells.ndim != 2 or cells.shape[0] == 0:
        raise ValidationError("client cells must be a non-empty 2-D matrix")
    d = cells.shape[1]
    for v in vectors:
        if np.asarray(v).shape != (d,):
            raise DimensionError(f"parameter vector shape {np.asarray(v).shape} != ({d},)")
    return cells


def local_loss(cells, gamma_b, beta_b, anchor_gamma_b, anchor_beta_b,
               full_gamma, full_beta, cfg: TrainConfig) -> float:
    """Local objective value for one client.

    ``full_gamma``/``full_beta`` are the complete tables with the client's own
    row at its current ``(gamma_b, beta_b)`` value; only their Frobenius norms
    enter (the l2 term runs over all batches).
    """
    cells = _check_vectors(cells, gamma_b, beta_b, anchor_gamma_b, anchor_beta_b)
    full_gamma = np.asarray(full_gamma, dtype=np.float64)
    full_beta = np.asarray(full_beta, dtype=np.float64)
    if full_gamma.ndim != 2 or full_gamma.shape[1] != cells.shape[1]:
        raise DimensionError("full tables do not match the cell dimension")
    residual = gamma_b * cells + beta_b - cells
    recon = float(np.mean(np.sum(residual * residual, axis=1)))
    prox = cfg.mu * (
        float(np.sum((gamma_b - anchor_gamma_b) ** 2))
        + float(np.sum((beta_b - anchor_beta_b) ** 2))
    )
    l2 = cfg.lam * (float(np.sum(full_gamma**2)) + float(np.sum(full_beta**2)))
    return recon + prox + l2


def local_gradient(cells, gamma_b, beta_b, anchor_gamma_b, anchor_beta_b,
                   full_gamma, full_beta, cfg: TrainConfig):
    """Analytic gradient of the local objective w.r.t. the client's own rows.

    Other batches' rows are held fixed during local optimization, so their
    l2 contribution is constant and only ``2*lam*gamma_b`` / ``2*lam*beta_b``
    survive; gradients for those rows are not returned.
    """
    cells = _check_vectors(cells, gamma_b, beta_b, anchor_gamma_b, anchor_beta_b)
    m = cells.shape[0]
    residual = gamma_b * cells + beta_b - cells
    d_gamma = (2.0 / m) * np.sum(cells * residual, axis=0) \
        + 2.0 * cfg.mu * (gamma_b - anchor_gamma_b) + 2.0 * cfg.lam * gamma_b
    d_beta = (2.0 / m) * np.sum(residual, axis=0) \
        + 2.0 * cfg.mu * (beta_b - anchor_beta_b) + 2.0 * cfg.lam * beta_b
    return d_gamma, d_beta


def _adam_step(state: ClientState, gamma, beta, d_gamma, d_beta, cfg: TrainConfig):
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.m_gamma = b1 * state.m_gamma + (1 - b1) * d_gamma
    state.v_gamma = b2 * state.v_gamma + (1 - b2) * d_gamma * d_gamma
    state.m_beta = b1 * state.m_beta + (1 - b1) * d_beta
    state.v_beta = b2 * state.v_beta + (1 - b2) * d_beta * d_beta
    mg = state.m_gamma / (1 - b1**t)
    vg = state.v_gamma / (1 - b2**t)
    mb = state.m_beta / (1 - b1**t)
    vb = state.v_beta / (1 - b2**t)
    gamma = gamma - cfg.learning_rate * mg / (np.sqrt(vg) + cfg.adam_epsilon)
    beta = beta - cfg.learning_rate * mb / (np.sqrt(vb) + cfg.adam_epsilon)
    return gamma, beta


def client_local_update(state: ClientState, client_cells, snapshot: FilmAdapter,
                        cfg: TrainConfig, round_index: int):
    """Run one round of local epochs for a single client.

    ``snapshot`` is the immutable round-start global adapter; its rows for
    this client are both the starting point and the proximal anchor for the
    whole round. Returns ``(gamma_row, beta_row, train_loss, holdout_loss)``
    where the losses are evaluated after the last epoch (holdout loss is
    NaN when the split leaves no holdout cells).
    """
    cells = np.asarray(client_cells, dtype=np.float64)
    if cells.ndim != 2:
        raise ValidationError("client cells must be a 2-D matrix")
    row = snapshot.row_index(state.batch_name)
    anchor_gamma = snapshot.gamma[row].copy()
    anchor_beta = snapshot.beta[row].copy()
    if cells.shape[1] != snapshot.d:
        raise DimensionError("client cells do not match the adapter dimension")
    if len(state.train_indices) == 0:
        raise ClientEmptyError(f"client {state.batch_name!r} has zero training cells")
    if cfg.reset_moments_per_round:
        state.reset_moments(snapshot.d)

    train = cells[state.train_indices]
    gamma = anchor_gamma.copy()
    beta = anchor_beta.copy()
    for epoch in range(cfg.local_epochs):
        rng = np.random.default_rng(
            [cfg.seed, _SHUFFLE_STREAM, round_index, epoch, state.batch_index]
        )
        order = rng.permutation(len(train))
        for start in range(0, len(train), cfg.minibatch_size):
            zb = train[order[start:start + cfg.minibatch_size]]
            d_gamma, d_beta = local_gradient(
                zb, gamma, beta, anchor_gamma, anchor_beta, None, None, cfg
            )
            gamma, beta = _adam_step(state, gamma, beta, d_gamma, d_beta, cfg)

    # Frobenius norms of the full tables with this client's row at its final
    # value; other rows sit at the round-start snapshot.
    full_gamma = snapshot.gamma.copy()
    full_beta = snapshot.beta.copy()
    full_gamma[row] = gamma
    full_beta[row] = beta
    train_loss = local_loss(
        train, gamma, beta, anchor_gamma, anchor_beta, full_gamma, full_beta, cfg
    )
    if len(state.holdout_indices):
        holdout_loss = local_loss(
            cells[state.holdout_indices], gamma, beta, anchor_gamma, anchor_beta,
            full_gamma, full_beta, cfg,
        )
    else:
        holdout_loss = float("nan")
    return gamma, beta, train_loss, holdout_loss
