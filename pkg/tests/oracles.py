"""Slow, literal reference implementations used to check the fast paths."""
import numpy as np


def explicit_update(theta, yhat, y, r_diag, eta):
    """theta_j + C_ty (C_yy + R)^-1 (y + eta_j - yhat_j), covariances formed in full."""
    J = theta.shape[0]
    dt = theta - theta.mean(axis=0)
    dy = yhat - yhat.mean(axis=0)
    c_ty = dt.T @ dy / (J - 1)
    c_yy = dy.T @ dy / (J - 1)
    gain = c_ty @ np.linalg.inv(c_yy + np.diag(r_diag))
    return theta + ((y + eta - yhat) @ gain.T)


def reference_forward(theta, arch, u, y):
    """One member, one function, loop over query points."""
    from eki_deeponet.deeponet import unpack

    layers = unpack(theta, arch)
    acts = {"relu": lambda h: np.maximum(h, 0.0), "tanh": np.tanh}

    def mlp(x, net, act):
        h = x
        for k, (w, b) in enumerate(net):
            h = w @ h + b
            if k < len(net) - 1:
                h = acts[act](h)
        return h

    bf = mlp(np.asarray(u, float), layers["branch"], arch.branch_activation)
    y = np.asarray(y, float).reshape(-1, arch.trunk_dims[0])
    return np.array([bf @ mlp(p, layers["trunk"], arch.trunk_activation) for p in y])
