import numpy as np


def central_difference(fn, arrays, step=1e-5):
    """Central finite differences of scalar ``fn(arrays)`` w.r.t. every entry.

    ``arrays`` is a list of float arrays, perturbed in place and restored.
    """
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            hi = fn(arrays)
            flat[k] = old - step
            lo = fn(arrays)
            flat[k] = old
            gf[k] = (hi - lo) / (2 * step)
        out.append(g)
    return out


def max_rel_err(a, b, floor=1e-4):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def linear_components(num_observed, num_latent):
    """Closed-form ell/xi for a linear-Gaussian SCM.

    ``ell`` places v_j in slot j of a one-hot summary; ``xi1``/``xi2`` read the
    summary with weight matrices ``lin.obs`` (D, D) and ``lin.lat`` (M, D)
    taken from the parameter mapping, so x_i = sum_j B[j, i] x_j + sum_k C[k, i] u_k.
    """
    from nadmg import diffnum as dn

    total = num_observed + num_latent
    eye = np.eye(total)

    def ell(p, values, node_slice):
        values = dn.as_value(values)
        b, n = values.shape
        return dn.reshape(values, (b, n, 1)) * eye[node_slice]

    def xi(p, name, summary, d):
        coef = np.zeros((total, d))
        if name == "xi1":
            w = dn.concat([dn.as_value(p["lin.obs"]), coef[num_observed:]], axis=0)
        else:
            w = dn.concat([coef[:num_observed], dn.as_value(p["lin.lat"])], axis=0)
        return dn.sum(summary * dn.transpose(w), axis=-1)

    return ell, xi


def linear_gaussian_cov(b_obs, c_lat, sigma):
    """Covariance of x = B^T x + C^T u + eps with u ~ N(0, I), eps ~ N(0, diag sigma^2)."""
    d = b_obs.shape[0]
    a = np.linalg.inv(np.eye(d) - b_obs.T)
    inner = c_lat.T @ c_lat + np.diag(np.asarray(sigma) ** 2)
    return a @ inner @ a.T
