"""Distributional quantile critic ensemble.

An ensemble of N dense nets each predicts M quantile atoms of the return
distribution for a (state, action) pair. TD targets are built by pooling
all N*M next-state atoms, sorting them, dropping the largest round(d*N)
of them, and mapping the survivors through the Bellman backup. Training
minimizes the quantile Huber loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import AdamState, DenseNet, backward, forward, forward_cached


def quantile_fractions(m: int) -> np.ndarray:
    """Midpoint quantile fractions (2i - 1) / (2m) for i = 1..m."""
    if m < 1:
        raise ValueError("need at least one atom")
    return (2.0 * np.arange(1, m + 1) - 1.0) / (2.0 * m)


def drop_count(d: float, n_nets: int) -> int:
    """Total pooled targets to drop for truncation level d: round(d*N), half up."""
    if d < 0:
        raise ValueError("d must be non-negative")
    return int(np.floor(d * n_nets + 0.5))


@dataclass
class TargetSet:
    """Kept Bellman target atoms for one transition, sorted ascending."""

    atoms: np.ndarray
    reward: float
    gamma: float
    entropy_term: float


def build_truncated_targets(
    next_atoms: np.ndarray,
    reward: float,
    gamma: float,
    true_terminal: bool,
    entropy_term: float,
    d: float,
) -> TargetSet:
    """Pool all next-state atoms, drop the largest round(d*N), apply the backup.

    Kept atoms map through y = r + gamma * (z - entropy_term); a true
    terminal collapses every target to the reward. Timeouts are not
    terminals and must be passed with true_terminal=False so the value
    bootstraps through the episode cutoff.
    """
    next_atoms = np.asarray(next_atoms, dtype=float)
    if next_atoms.ndim != 2:
        raise ValueError("next_atoms must be (n_nets, n_atoms)")
    n_nets = next_atoms.shape[0]
    batch = _truncated_targets_batch(
        next_atoms[:, None, :],
        np.array([reward], dtype=float),
        gamma,
        np.array([true_terminal]),
        np.array([entropy_term], dtype=float),
        d,
        n_nets,
    )
    return TargetSet(batch[0], reward, gamma, entropy_term)


def _truncated_targets_batch(
    next_atoms: np.ndarray,
    rewards: np.ndarray,
    gamma: float,
    true_terminal: np.ndarray,
    entropy_terms: np.ndarray,
    d: float,
    n_nets: int,
) -> np.ndarray:
    """Vectorized target construction. next_atoms is (N, B, M); returns (B, K)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    n, b, m = next_atoms.shape
    dropped = drop_count(d, n_nets)
    if dropped > n * m:
        raise ValueError(f"cannot drop {dropped} of {n * m} pooled targets")
    pooled = np.sort(next_atoms.transpose(1, 0, 2).reshape(b, n * m), axis=1)
    kept = pooled[:, : n * m - dropped]
    backed_up = rewards[:, None] + gamma * (kept - entropy_terms[:, None])
    terminal_only = np.broadcast_to(rewards[:, None], kept.shape)
    return np.where(true_terminal[:, None], terminal_only, backed_up)


def quantile_huber_loss(
    pred_atoms: np.ndarray,
    targets: TargetSet | np.ndarray,
    fractions: np.ndarray,
    kappa: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Quantile Huber loss of M predicted atoms against K kept targets.

    Returns (loss, dloss/dpred_atoms) with the 1/(K*M) normalization. The
    per-pair term is |tau - 1{u<0}| * huber(u) for residual u = y - theta.
    """
    atoms = targets.atoms if isinstance(targets, TargetSet) else np.asarray(targets, dtype=float)
    if atoms.size == 0:
        raise ValueError("empty target set")
    pred = np.asarray(pred_atoms, dtype=float)
    loss, grad = _qh_loss_grad(pred[None, :], np.sort(atoms)[None, :], np.asarray(fractions), kappa)
    return float(loss[0]), grad[0]


def _qh_loss_grad(
    preds: np.ndarray, sorted_targets: np.ndarray, taus: np.ndarray, kappa: float
) -> tuple[np.ndarray, np.ndarray]:
    """Loss and gradient for a batch: preds (B, M), sorted_targets (B, K).

    Works off prefix sums of the sorted targets so cost is O(B*M log K)
    rather than O(B*M*K). Regions per prediction theta:
      y <  theta - kappa : linear zone, weight (1 - tau)
      y in [theta-k, theta): quadratic zone, weight (1 - tau)
      y in [theta, theta+k]: quadratic zone, weight tau
      y >  theta + kappa : linear zone, weight tau
    Returns per-sample loss (B,) and gradient (B, M), both with the
    1/(K*M) normalization.
    """
    nb, m = preds.shape
    k = sorted_targets.shape[1]
    s1 = np.zeros((nb, k + 1))
    s2 = np.zeros((nb, k + 1))
    np.cumsum(sorted_targets, axis=1, out=s1[:, 1:])
    np.cumsum(sorted_targets * sorted_targets, axis=1, out=s2[:, 1:])

    # Row-offset trick: shift each row into its own disjoint interval so one
    # global searchsorted resolves all rows at once.
    lo = min(sorted_targets.min(), preds.min() - kappa) - 1.0
    hi = max(sorted_targets.max(), preds.max() + kappa) + 1.0
    width = hi - lo + 1.0
    shift = np.arange(nb)[:, None] * width
    flat_y = (sorted_targets - lo + shift).ravel()
    q = preds - lo + shift
    j0 = np.searchsorted(flat_y, (q - kappa).ravel(), side="left").reshape(nb, m) - np.arange(nb)[:, None] * k
    j1 = np.searchsorted(flat_y, q.ravel(), side="left").reshape(nb, m) - np.arange(nb)[:, None] * k
    j2 = np.searchsorted(flat_y, (q + kappa).ravel(), side="right").reshape(nb, m) - np.arange(nb)[:, None] * k

    row = np.arange(nb)[:, None]
    s1_0, s1_1, s1_2 = s1[row, j0], s1[row, j1], s1[row, j2]
    s2_0, s2_1, s2_2 = s2[row, j0], s2[row, j1], s2[row, j2]
    s1_k = s1[:, -1:]
    theta = preds
    w_lo = 1.0 - taus[None, :]
    w_hi = taus[None, :]

    # gradient contributions per region (see docstring)
    grad = (
        kappa * w_lo * j0
        + w_lo * (theta * (j1 - j0) - (s1_1 - s1_0))
        + w_hi * (theta * (j2 - j1) - (s1_2 - s1_1))
        - kappa * w_hi * (k - j2)
    )
    # loss: linear tails plus quadratic middle
    lin_lo = kappa * ((theta - 0.5 * kappa) * j0 - s1_0)
    lin_hi = kappa * ((s1_k - s1_2) - (theta + 0.5 * kappa) * (k - j2))
    quad_lo = 0.5 * ((s2_1 - s2_0) - 2.0 * theta * (s1_1 - s1_0) + theta * theta * (j1 - j0))
    quad_hi = 0.5 * ((s2_2 - s2_1) - 2.0 * theta * (s1_2 - s1_1) + theta * theta * (j2 - j1))
    loss_m = w_lo * (lin_lo + quad_lo) + w_hi * (quad_hi + lin_hi)

    norm = 1.0 / (k * m)
    return loss_m.sum(axis=1) * norm, grad * norm


@dataclass
class QuantileEnsemble:
    """N online quantile critics plus Polyak-tracked target copies."""

    nets: list[DenseNet]
    target_nets: list[DenseNet]
    adams: list[AdamState]
    n_atoms: int
    kappa: float
    fractions: np.ndarray

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        n_critics: int,
        n_atoms: int,
        hidden: tuple[int, ...],
        lr: float,
        rng: np.random.Generator,
        kappa: float = 1.0,
        dtype: type = np.float64,
    ) -> "QuantileEnsemble":
        dims = [state_dim + action_dim, *hidden, n_atoms]
        nets = [DenseNet.create(dims, rng, dtype=dtype) for _ in range(n_critics)]
        return cls(
            nets=nets,
            target_nets=[net.clone() for net in nets],
            adams=[AdamState.for_net(net, lr) for net in nets],
            n_atoms=n_atoms,
            kappa=kappa,
            fractions=quantile_fractions(n_atoms),
        )

    @property
    def n_critics(self) -> int:
        return len(self.nets)

    def predict_atoms(
        self, state: np.ndarray, action: np.ndarray, use_target: bool = False
    ) -> np.ndarray:
        """Atoms for one pair as (N, M), or for a batch as (N, B, M)."""
        x = np.concatenate([np.atleast_2d(state), np.atleast_2d(action)], axis=1)
        nets = self.target_nets if use_target else self.nets
        atoms = np.stack([forward(net, x) for net in nets])
        return atoms[:, 0, :] if np.asarray(state).ndim == 1 else atoms

    def mean_value(self, state: np.ndarray, action: np.ndarray) -> float | np.ndarray:
        """Mean over all N*M atoms; the scalar value estimate."""
        atoms = self.predict_atoms(state, action)
        return atoms.mean(axis=(0, -1)) if atoms.ndim == 3 else float(atoms.mean())

    def mean_value_and_action_grad(
        self, states: np.ndarray, actions: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Batched mean value plus its gradient w.r.t. the action input."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        x = np.concatenate([states, actions], axis=1)
        nb = x.shape[0]
        total = 0.0
        dq_dx = np.zeros_like(x)
        upstream = np.full((nb, self.n_atoms), 1.0 / (self.n_critics * self.n_atoms))
        for net in self.nets:
            out, cache = forward_cached(net, x)
            total = total + out.sum(axis=1)
            _, gx = backward(net, cache, upstream)
            dq_dx += gx
        q = total / (self.n_critics * self.n_atoms)
        return q, dq_dx[:, states.shape[1]:]

    def sync_targets(self, tau: float) -> None:
        from .nets import polyak_update

        for tgt, net in zip(self.target_nets, self.nets):
            polyak_update(tgt, net, tau)

    def named_parameters(self, prefix: str = "critic") -> dict[str, np.ndarray]:
        from .nets import named_parameters

        out: dict[str, np.ndarray] = {}
        for i, (net, tgt) in enumerate(zip(self.nets, self.target_nets)):
            out.update(named_parameters(net, f"{prefix}{i}"))
            out.update(named_parameters(tgt, f"{prefix}{i}_target"))
        return out
