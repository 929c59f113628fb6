import numpy as np

from ..errors import IntegrationError


def rk4_step(f, x, t, dt):
    """Classical fourth-order Runge-Kutta step of ``dx/dt = f(x, t)``."""
    x = np.asarray(x, dtype=float)
    k1 = f(x, t)
    k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = f(x + dt * k3, t + dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(f, x0, t0, t1, n_steps):
    """Integrate from ``t0`` to ``t1`` with ``n_steps`` equal RK4 steps."""
    x = np.asarray(x0, dtype=float)
    dt = (t1 - t0) / n_steps
    for i in range(n_steps):
        x = rk4_step(f, x, t0 + i * dt, dt)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(i)
    return x
