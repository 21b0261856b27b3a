"""Pure-numpy backbone kernels: the fallback backend.

Same contract as the compiled `_kernels` extension. Layer update (parallel
placement, the default):

    x_{l+1} = tanh(x_l @ W_block[l]) + relu(x_l @ W_down[l]) @ W_up[l]

Serial placement feeds the adapter with the block output instead:

    z = tanh(x_l @ W_block[l]);  x_{l+1} = z + relu(z @ W_down[l]) @ W_up[l]

forward_batch returns everything backward_batch needs: per-layer inputs,
post-ReLU adapter intermediates, and tanh outputs.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def forward_batch(x0, w_blocks, w_down, w_up, serial=False):
    """Run a (B, d_t, d) token batch through every layer.

    Returns (xs, u_tildes, tanhs):
      xs       (L+1, B, d_t, d)   layer inputs, xs[L] is the final output
      u_tildes (L, B, d_t, d_h)   relu(adapter_input @ W_down)
      tanhs    (L, B, d_t, d)     tanh(x @ W_block)
    """
    n_layers = w_blocks.shape[0]
    b, d_t, d = x0.shape
    d_h = w_down.shape[2]
    xs = np.empty((n_layers + 1, b, d_t, d), dtype=np.float64)
    u_tildes = np.empty((n_layers, b, d_t, d_h), dtype=np.float64)
    tanhs = np.empty((n_layers, b, d_t, d), dtype=np.float64)
    xs[0] = x0
    x = xs[0]
    for l in range(n_layers):
        t = np.tanh(x @ w_blocks[l])
        a_in = t if serial else x
        u = a_in @ w_down[l]
        np.maximum(u, 0.0, out=u)
        tanhs[l] = t
        u_tildes[l] = u
        xs[l + 1] = t + u @ w_up[l]
        x = xs[l + 1]
    return xs, u_tildes, tanhs


def backward_batch(dfeat, xs, u_tildes, tanhs, w_blocks, w_down, w_up, serial=False):
    """Backpropagate a (B, d) gradient on the CLS feature to the adapters.

    Returns (g_down (L, d, d_h), g_up (L, d_h, d)) summed over the batch.
    Frozen block weights receive no gradient by construction.
    """
    n_layers = w_blocks.shape[0]
    b, d_t, d = xs[0].shape
    dx = np.zeros((b, d_t, d), dtype=np.float64)
    dx[:, 0, :] = dfeat
    g_down = np.zeros_like(w_down)
    g_up = np.zeros_like(w_up)
    for l in range(n_layers - 1, -1, -1):
        t = tanhs[l]
        u = u_tildes[l]
        mask = u > 0.0
        du = (dx @ w_up[l].T) * mask
        g_up[l] = np.einsum("bth,btd->hd", u, dx)
        a_in = t if serial else xs[l]
        g_down[l] = np.einsum("btd,bth->dh", a_in, du)
        if serial:
            dt = dx + du @ w_down[l].T
            dx = (dt * (1.0 - t * t)) @ w_blocks[l].T
        else:
            dx = (dx * (1.0 - t * t)) @ w_blocks[l].T + du @ w_down[l].T
    return g_down, g_up
