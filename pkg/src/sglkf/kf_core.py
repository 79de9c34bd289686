"""Constant-velocity Kalman filter with externally supplied noise.

State layouts (rates are per frame):

* 2D, dim 8: ``[x, y, w, h, vx, vy, vw, vh]`` with observation ``[x, y, w, h]``
* 3D, dim 12: ``[x, y, z, w, h, l, vx, vy, vz, vw, vh, vl]`` with observation
  ``[x, y, z, w, h, l]``

All functions accept leading batch dimensions on ``state``/``cov`` and the noise
vectors, so a whole set of tracks can be stepped at once.
"""
import numpy as np

from .errors import ConfigurationError, NumericError

VALID_DIMS = (8, 12)
SIZE_FLOOR = 1e-3


def obs_dim_for(dim):
    if dim not in VALID_DIMS:
        raise ConfigurationError(f"state dim must be one of {VALID_DIMS}, got {dim}")
    return dim // 2


def size_slice(dim):
    """Indices of the size components (w, h[, l]) inside the state."""
    return slice(2, 4) if dim == 8 else slice(3, 6)


def make_transition(dim, dt=1.0):
    """Block matrix ``[[I, dt*I], [0, I]]`` for a ``dim``-dimensional state."""
    half = obs_dim_for(dim)
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    F = np.eye(dim)
    F[:half, half:] = dt * np.eye(half)
    return F


def observation_matrix(dim):
    half = obs_dim_for(dim)
    return np.eye(half, dim)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value in Kalman filter input")


def predict(state, cov, q, dt=1.0):
    """Propagate mean and covariance one step.

    Args:
        state: (..., dim) posterior mean.
        cov: (..., dim, dim) posterior covariance.
        q: (..., dim) positive process-noise diagonal.
        dt: step length in frames.

    Returns:
        ``(state_pred, cov_pred)``.
    """
    state = np.asarray(state, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_finite(state, cov, q)
    if np.any(q <= 0):
        raise NumericError("process noise entries must be positive")
    F = make_transition(state.shape[-1], dt)
    state_pred = state @ F.T
    cov_pred = F @ cov @ F.T + _diag(q)
    return state_pred, _symmetrize(cov_pred)


def gain(cov_pred, r, obs_matrix=None):
    """Kalman gain ``P H^T (H P H^T + R)^-1``.

    Raises:
        NumericError: when the innovation covariance is singular or badly
            conditioned; the message carries the condition number.
    """
    cov_pred = np.asarray(cov_pred, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    H = observation_matrix(cov_pred.shape[-1]) if obs_matrix is None else np.asarray(obs_matrix, dtype=np.float64)
    _check_finite(cov_pred, r)
    PHt = cov_pred @ H.T
    S = H @ PHt + _diag(r)
    cond = np.linalg.cond(S)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e14):
        raise NumericError(f"innovation covariance is singular (condition number {np.max(cond):.3e})")
    # K = P H^T S^-1  <=>  S^T K^T = H P^T
    K = np.swapaxes(np.linalg.solve(np.swapaxes(S, -1, -2), np.swapaxes(PHt, -1, -2)), -1, -2)
    return K


def update(state_pred, cov_pred, z, r, posterior_cov_override=None, obs_matrix=None):
    """Fuse an observation into the predicted state.

    The gain always uses the propagated ``cov_pred``.  The returned covariance
    is ``posterior_cov_override`` verbatim when given (the learned posterior),
    otherwise the Joseph form ``(I-KH) P (I-KH)^T + K R K^T``.

    Returns:
        ``(state, cov, innovation)``.
    """
    state_pred = np.asarray(state_pred, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    _check_finite(state_pred, z)
    dim = state_pred.shape[-1]
    H = observation_matrix(dim) if obs_matrix is None else np.asarray(obs_matrix, dtype=np.float64)
    K = gain(cov_pred, r, H)
    innovation = z - state_pred @ H.T
    state = state_pred + (K @ innovation[..., None])[..., 0]
    if obs_matrix is None:
        sizes = size_slice(dim)
        state[..., sizes] = np.maximum(state[..., sizes], SIZE_FLOOR)
    if posterior_cov_override is not None:
        cov = np.array(posterior_cov_override, dtype=np.float64)
        if cov.shape != np.shape(cov_pred):
            raise NumericError(f"posterior override shape {cov.shape} != {np.shape(cov_pred)}")
        return state, cov, innovation
    I_KH = np.eye(dim) - K @ H
    cov = I_KH @ cov_pred @ np.swapaxes(I_KH, -1, -2) + K @ _diag(r) @ np.swapaxes(K, -1, -2)
    return state, _symmetrize(cov), innovation


def _diag(v):
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out


def _symmetrize(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))
