"""Independent oracles for frozen test values.

Scalar cases use mpmath at 50 digits. The composite case re-implements the
head forward pass in torch float64 and takes gradients with torch autograd;
the hard mask is detached. Output: tests/unit/oracle_values.inc.

Run: python tests/oracles/generate_oracles.py
"""

import math
import pathlib

import mpmath as mp
import torch

mp.mp.dps = 50
torch.set_default_dtype(torch.float64)

OUT = pathlib.Path(__file__).resolve().parents[1] / "unit" / "oracle_values.inc"


def sigmoid(x):
    return 1 / (1 + mp.e ** (-x))


def scalar_cases():
    v = {}
    v["kCosineDiag"] = mp.mpf(1) / mp.sqrt(2)
    v["kSigmoidOne"] = sigmoid(mp.mpf(1))
    a, b, tau = mp.mpf("0.7311"), mp.mpf("0.5"), mp.mpf("0.2")
    z = mp.e ** (a / tau) + mp.e ** (b / tau)
    v["kSoftmaxTemp0"] = mp.e ** (a / tau) / z
    v["kSoftmaxTemp1"] = mp.e ** (b / tau) / z
    z3 = mp.e ** 1 + mp.e ** 2 + mp.e ** 3
    v["kCrossEntropy123"] = -mp.log(mp.e ** 3 / z3)
    for i in range(3):
        v[f"kSoftmax123_{i}"] = mp.e ** (i + 1) / z3
    v["kAdjusted"] = mp.mpf("0.3") * mp.e ** (mp.mpf("0.2") * (mp.mpf("0.3") - mp.mpf("0.2")))
    v["kSoftMaskBeta50"] = sigmoid(50 * (mp.mpf("0.3") - mp.mpf("0.2")))
    # AdamW, param 1.0, grad 1.0, lr 0.1, decay 1e-4, first step.
    lr, wd, eps = mp.mpf("0.1"), mp.mpf("1e-4"), mp.mpf("1e-8")
    p = mp.mpf(1) - lr * wd * 1
    m_hat, v_hat = mp.mpf(1), mp.mpf(1)
    v["kAdamWStep1"] = p - lr * m_hat / (mp.sqrt(v_hat) + eps)
    return v


# Deterministic composite inputs; the C++ test rebuilds them with the same formula.
def fill(shape, offset, scale=1.0):
    n = math.prod(shape)
    return torch.tensor([scale * math.sin(0.7 * i + offset) for i in range(n)]).reshape(shape)


L, M, K, D, NP, C = 3, 2, 2, 4, 4, 2
LABEL, CONCEPT_LABELS = 1, [0, 1]
LAMBDA1, LAMBDA2, BETA = 1.0, 0.01, 50.0


def composite():
    cls = fill((L, D), 0.1)
    patches = fill((L, NP, D), 0.2)
    attrs = fill((M, D), 0.3)
    concepts = fill((M, K, D), 0.4)
    log_tau1 = torch.tensor(math.log(0.2), requires_grad=True)
    tau2 = torch.tensor(0.35, requires_grad=True)
    k_param = torch.tensor(0.1, requires_grad=True)
    W = fill((C, M * K), 0.5, 0.1).requires_grad_(True)
    b = torch.tensor([0.05, -0.05], requires_grad=True)

    def cos(u, v):
        return (u * v).sum(-1) / (u.norm(dim=-1) * v.norm(dim=-1))

    raw = torch.sigmoid(cos(cls[:, None, :], attrs[None, :, :]))  # L x M
    pref = torch.softmax(raw / torch.exp(log_tau1), dim=1)
    bounds = [0, 2, 4]  # round-half-even(i * 4 / 2)
    pooled = torch.stack([patches[:, bounds[i]:bounds[i + 1], :].mean(1) for i in range(M)], dim=1)  # L x M x D
    cosines = cos(pooled[:, :, None, :], concepts[None, :, :, :])  # L x M x K
    s = pref[:, :, None] * cosines
    w = torch.softmax(s, dim=0)
    aw = w.abs().reshape(L, -1)
    lo, hi = aw.min(1).values, aw.max(1).values
    theta = torch.sigmoid(k_param) * (hi - lo) + lo
    gap = aw - theta[:, None]
    adj = (torch.exp(torch.clamp(tau2 * gap, -30, 30)) * w.reshape(L, -1)).reshape(L, M, K)
    mask = (aw >= torch.minimum(theta, hi)[:, None]).double().detach().reshape(L, M, K)
    agg = (mask * adj * s).sum(0)
    logits = W @ agg.reshape(-1) + b
    ce = torch.nn.functional.cross_entropy(logits[None], torch.tensor([LABEL]))
    concept = torch.nn.functional.cross_entropy(agg, torch.tensor(CONCEPT_LABELS))
    surrogate = torch.sigmoid(BETA * gap).mean()
    total = ce + LAMBDA1 * concept + LAMBDA2 * surrogate
    total.backward()

    out = {
        "kCompositeLogits": logits.detach().tolist(),
        "kCompositeAggregated": agg.detach().reshape(-1).tolist(),
        "kCompositeThresholds": theta.detach().tolist(),
        "kCompositeLoss": [total.item(), ce.item(), concept.item(), surrogate.item()],
        "kCompositeHardSparsity": [mask.mean().item()],
        "kCompositeGradScalars": [log_tau1.grad.item(), tau2.grad.item(), k_param.grad.item()],
        "kCompositeGradW": W.grad.reshape(-1).tolist(),
        "kCompositeGradB": b.grad.tolist(),
    }
    return out


def main():
    lines = ["// Generated by tests/oracles/generate_oracles.py; do not edit.", ""]
    for name, value in scalar_cases().items():
        lines.append(f"inline constexpr double {name} = {mp.nstr(value, 20)};")
    lines.append("")
    for name, values in composite().items():
        body = ", ".join(repr(float(x)) for x in values)
        lines.append(f"inline constexpr double {name}[] = {{{body}}};")
    OUT.write_text("\n".join(lines) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
