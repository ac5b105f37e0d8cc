"""Independent oracles shared by the tests."""
import numpy as np


def orthogonal(rng, n):
    """Haar-distributed orthogonal matrix via QR, independent of the library's SVD construction."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _relu(x):
    return np.maximum(x, 0.0)


def _grid(z, slope, coeffs, knots):
    # z (P, c); slope (P, r, c); coeffs (P, r, c, B) -> (P, r), written out term by term
    out = np.einsum("prc,pc->pr", slope, z)
    for b, t in enumerate(knots):
        out = out + np.einsum("prc,pc->pr", coeffs[..., b], _relu(z - t))
    return out


def reference_forward(model, flat_params, x):
    """Model output for each row of ``flat_params`` (P, n_params) at one standardized input ``x``.

    Walks the parameter layout independently of the library's batch code.
    """
    W = np.atleast_2d(np.asarray(flat_params, dtype=float))
    P = W.shape[0]
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = W[:, pos:pos + size].reshape((P,) + tuple(shape))
        pos += size
        return out

    x = np.asarray(x, dtype=float)
    if model.pool is not None:
        B = model.pool.knots.size
        M = model.pool.width
        slope, coeffs = take((M,)), take((M, B))
        v = x.ravel()
        z = slope * v.sum()
        for b, t in enumerate(model.pool.knots):
            z = z + coeffs[:, :, b] * _relu(v - t).sum()
    else:
        z = np.broadcast_to(x, (P, x.size))
    for layer in model.layers:
        if layer.kind == "gksn":
            k, m = layer.phi.shape
            l = layer.psi.shape[0]
            kr = layer.w_phi.shape[0]
            B = layer.phi.knots.size
            ps, pc = take((k, m)), take((k, m, B))
            qs, qc = take((l, k)), take((l, k, B))
            wphi, wpsi = take((kr, m)), take((l, kr))
            s = _grid(z, ps, pc, layer.phi.knots)
            kst = _grid(s, qs, qc, layer.psi.knots)
            z = kst + np.einsum("plr,pr->pl", wpsi, _relu(np.einsum("prm,pm->pr", wphi, z)))
        else:
            l, m = layer.W.shape
            Wd, bd = take((l, m)), take((l,))
            h = np.einsum("plm,pm->pl", Wd, z) + bd
            z = _relu(h) if layer.activation else h
    assert pos == W.shape[1]
    return z[:, 0]
