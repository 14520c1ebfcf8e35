"""A short walk through the reverse-mode engine.

Run: python demos/01_autodiff_tour.py
"""
import numpy as np

from frozenadv.autodiff import OPS, Graph, sign

print(len(OPS), "ops:", ", ".join(sorted(OPS)))

# %% a tiny two-layer network and its input gradient
rng = np.random.default_rng(0)
w1, b1 = rng.normal(size=(5, 8)), np.zeros(8)
w2, b2 = rng.normal(size=(8, 3)), np.zeros(3)
x0 = rng.normal(size=(2, 5))


def net(v):
    g = Graph(mode="frozen")          # params get no gradient in frozen mode
    x = g.input(v)
    h = g.op("gelu", g.op("linear", x, g.param(w1), g.param(b1)))
    out = g.op("l2-norm", g.op("linear", h, g.param(w2), g.param(b2)))
    return g, x, out


g, x, out = net(x0)
g.backward(out)
print("loss", g.value(out))
print("dL/dx\n", g.grad(x))

# %% compare against central differences
def loss(v):
    gg, _, o = net(v)
    return gg.value(o)


h = 1e-5
fd = np.zeros_like(x0)
for i in np.ndindex(x0.shape):
    e = np.zeros_like(x0)
    e[i] = h
    fd[i] = (loss(x0 + e) - loss(x0 - e)) / (2 * h)
print("max abs diff vs finite differences:", np.abs(fd - g.grad(x)).max())

# %% sign() is what a BIM step uses; note sign(0) = 0
print(sign(np.array([0.3, -2.0, 0.0])))
