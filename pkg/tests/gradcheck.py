"""Central-difference gradient checking against float64 twins.

Finite differences of a float32 forward are too noisy near the 1e-2
acceptance tolerance, so each check probes a float64 copy of the model
(the same code path; numpy preserves the wider dtype) while the analytic
gradients come from the float32 production path. A probe is only accepted
when shrinking the step leaves the estimate unchanged, which rejects the
rare probe whose step straddles a ReLU kink, where the central difference
itself is not a derivative.
"""

import numpy as np

STEP = 1e-3
REL_TOL = 1e-2
FLOOR = 1e-4


def f64_backbone(bb):
    twin = bb.copy()
    twin.weights = {k: v.astype(np.float64) for k, v in bb.weights.items()}
    return twin


def f64_adapter(ad):
    from lorafuse.lora import LoraAdapter

    twin = LoraAdapter(ad.adapter_id, ad.task_label, ad.rank, ad.scale)
    twin.layer_deltas = {
        name: (a.astype(np.float64), b.astype(np.float64))
        for name, (a, b) in ad.layer_deltas.items()
    }
    return twin


def f64_mlp(mlp):
    from lorafuse.router import MiniMlp

    twin = MiniMlp.zeros(mlp.layer_dims)
    twin.weights = [w.astype(np.float64) for w in mlp.weights]
    twin.biases = [b.astype(np.float64) for b in mlp.biases]
    return twin


def check_array_grad(loss_fn, arr, analytic, rng, n_probes=8):
    """Probe entries of the float64 ``arr`` and compare ``loss_fn`` central
    differences at step 1e-3 against the ``analytic`` float32 gradients."""
    flat = arr.reshape(-1)
    gflat = np.asarray(analytic).reshape(-1)
    order = rng.permutation(flat.size)
    checked, worst = 0, 0.0
    for idx in order:
        if checked >= n_probes:
            break
        orig = flat[idx]

        def fd(h):
            flat[idx] = orig + h
            lp = loss_fn()
            flat[idx] = orig - h
            lm = loss_fn()
            flat[idx] = orig
            return (lp - lm) / (2 * h)

        full, half, tiny = fd(STEP), fd(STEP / 2), fd(STEP / 8)
        scale = max(abs(tiny), FLOOR)
        if abs(full - half) > 0.005 * scale or abs(half - tiny) > 0.005 * scale:
            continue  # a kink inside the step: the difference quotient is invalid
        rel = abs(full - gflat[idx]) / max(abs(full), FLOOR)
        worst = max(worst, rel)
        assert rel <= REL_TOL, (
            f"gradient mismatch at flat index {idx}: fd={full:.6e} "
            f"analytic={gflat[idx]:.6e} rel={rel:.3e}"
        )
        checked += 1
    assert checked >= min(n_probes, 3), "too few valid finite-difference probes"
    return checked, worst
