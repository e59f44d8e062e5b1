import numpy as np
import pytest
import torch

from vidshadow.synthgen import OccluderSpec, SceneSpec


def make_scene(seed=3, frames=5, size=96, sigma=0.0, style="gradient",
               occluders=None, offset=(6, 5)):
    """Convenient single/multi occluder scene for oracle tests."""
    if occluders is None:
        occluders = (OccluderSpec(
            kind="disc", center=(30.0, 40.0), size=(14.0, 14.0), velocity=(2, 1),
            color_a=(0.30, 0.50, 0.70), color_b=(0.85, 0.60, 0.40),
            texture_angle=0.5, w=(2.0, 2.0, 2.0), b=(0.0, 0.0, 0.0),
        ),)
    return SceneSpec(
        seed=seed, frames=frames, height=size, width=size,
        background_style=style, penumbra_sigma=sigma, shadow_offset=offset,
        occluders=occluders,
    )


def finite_difference_gradients(fn, params, step=1e-3):
    """Central differences of scalar fn() w.r.t. a list of parameter tensors."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = fn()
                flat[i] = orig - step
                lo = fn()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * step)
            grads.append(g)
    return grads


def check_gradients(model, scalar_fn, step=1e-3, rtol=1e-3, params=None,
                    floor=1e-6):
    """Compare autograd gradients of scalar_fn(model) against central differences.

    The model is converted to float64 first. Returns the worst relative error.
    """
    model.double()
    params = list(model.parameters()) if params is None else params
    for p in model.parameters():
        p.grad = None
    out = scalar_fn()
    out.backward()
    analytic = [p.grad.clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]

    def eval_fn():
        with torch.enable_grad():
            pass
        return float(scalar_fn().detach())

    numeric = finite_difference_gradients(eval_fn, params, step=step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()),
                              torch.full_like(a, floor))
        rel = ((a - n).abs() / denom).max().item()
        worst = max(worst, rel)
    assert worst <= rtol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """3 tiny videos written to disk in the standard layout."""
    from vidshadow.synthgen import generate_dataset

    root = tmp_path_factory.mktemp("smalldata")
    manifest = generate_dataset(root, n_videos=3, frames=5, height=96, width=96,
                                seed=11, split_ratio=0.7)
    return root, manifest


def rand_frame(rng, h=16, w=16):
    from vidshadow.core import Frame

    return Frame(rng.random((3, h, w), dtype=np.float64).astype(np.float32))
