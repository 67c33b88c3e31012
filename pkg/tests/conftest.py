import numpy as np
import pytest

from wnet import tensor as T


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def naive_conv2d(x, w, b, stride, pad):
    """Direct seven-loop convolution, used as the oracle."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[i, c, y * stride + u, z * stride + v]
                    out[i, o, y, z] = acc
    return out


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        gf[i] = (plus - minus) / (2 * h)
    return g


def report(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
    return ok


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


def conv_oracle(conv, x):
    b = conv.bias.data if conv.bias is not None else None
    return naive_conv2d(x, conv.weight.data, b, conv.stride, conv.k // 2)


def ca_oracle(ca, x):
    pooled = x.mean(axis=(2, 3), keepdims=True)
    gate = sigmoid(conv_oracle(ca.excite, np.maximum(conv_oracle(ca.squeeze, pooled), 0)))
    return gate * x


def sa_oracle(sa, x):
    maps = np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    return sigmoid(conv_oracle(sa.conv, maps)) * x


ACCEPTANCE: list[str] = []


def acceptance(number, title, ok, detail=""):
    """Record one acceptance line; printed now and again in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
