"""Independent reference implementations used to check the package.

Nothing here imports the code under test except to read parameter arrays.
"""

import math

import numpy as np


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar f at array x (x is modified in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def logistic(z):
    return 1.0 / (1.0 + math.exp(-z))


def adjusted_ce(return_a, return_b, label, eps):
    """Per-pair loss written out directly from the definition."""
    p_a = logistic(return_a - return_b)
    p_a = (1 - eps) * p_a + eps / 2
    p_b = (1 - eps) * (1 - logistic(return_a - return_b)) + eps / 2
    return -((1 - label) * math.log(p_a) + label * math.log(p_b))


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _positions(length, width):
    pe = np.zeros((length, width))
    for pos in range(length):
        for i in range(width):
            angle = pos / 10000 ** (2 * (i // 2) / width)
            pe[pos, i] = math.sin(angle) if i % 2 == 0 else math.cos(angle)
    return pe


def reference_window_rewards(arrays, width, heads, blocks, windows, causal=True):
    """Full-sequence pre-LN transformer over each window, reward read at the last position.

    ``arrays`` maps parameter names to arrays; ``windows`` are normalized (N, L, F).
    """
    n, length, _ = windows.shape
    hd = width // heads
    out = np.zeros(n)
    pe = _positions(length, width)
    for w in range(n):
        h = windows[w] @ arrays["embed.w"] + arrays["embed.b"] + pe
        for i in range(blocks):
            p = f"block{i}."
            a = _ln(h, arrays[p + "ln1.g"], arrays[p + "ln1.b"])
            q = a @ arrays[p + "attn.q.w"] + arrays[p + "attn.q.b"]
            k = a @ arrays[p + "attn.k.w"] + arrays[p + "attn.k.b"]
            v = a @ arrays[p + "attn.v.w"] + arrays[p + "attn.v.b"]
            att = np.zeros((length, width))
            for j in range(heads):
                sl = slice(j * hd, (j + 1) * hd)
                s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
                if causal:
                    s = np.where(np.tril(np.ones((length, length))) > 0, s, -np.inf)
                s = np.exp(s - s.max(-1, keepdims=True))
                s = s / s.sum(-1, keepdims=True)
                att[:, sl] = s @ v[:, sl]
            h = h + att @ arrays[p + "attn.out.w"] + arrays[p + "attn.out.b"]
            m = _ln(h, arrays[p + "ln2.g"], arrays[p + "ln2.b"])
            m = _gelu(m @ arrays[p + "mlp.fc.w"] + arrays[p + "mlp.fc.b"])
            h = h + m @ arrays[p + "mlp.proj.w"] + arrays[p + "mlp.proj.b"]
        last = _ln(h[-1], arrays["ln_f.g"], arrays["ln_f.b"])
        out[w] = float(last @ arrays["head.w"][:, 0] + arrays["head.b"][0])
    return out


def reference_windows(x, length, episode_start=None):
    """Right-aligned trailing windows, zero left-padding, cut at episode starts; loops only."""
    b, t, f = x.shape
    out = np.zeros((b, t, length, f))
    for i in range(b):
        for s in range(t):
            first = 0
            if episode_start is not None:
                for u in range(s, -1, -1):
                    if episode_start[i, u]:
                        first = u
                        break
            for j in range(length):
                src = s - (length - 1 - j)
                if src >= first:
                    out[i, s, j] = x[i, src]
    return out


def reference_gae(rewards, values, dones, last_value, gamma, lam):
    """Single-env GAE by the textbook backward recursion."""
    t = len(rewards)
    adv = np.zeros(t)
    running = 0.0
    for s in reversed(range(t)):
        nxt = last_value if s == t - 1 else values[s + 1]
        nonterminal = 1.0 - dones[s]
        delta = rewards[s] + gamma * nxt * nonterminal - values[s]
        running = delta + gamma * lam * nonterminal * running
        adv[s] = running
    return adv, adv + values


def count_onsets(contacts):
    n = 0
    for t in range(1, len(contacts)):
        for f in range(4):
            if contacts[t - 1][f] == 0 and contacts[t][f] == 1:
                n += 1
    return n


def reference_sync_error(contacts):
    total = 0.0
    for row in contacts:
        total += abs(row[0] - row[1]) + abs(row[2] - row[3])
    return total / len(contacts)
