"""Acceptance criteria 1-8; each test records one PASS / FAIL / BLOCKED line in the terminal summary.

Criteria 6-8 need Stable Diffusion v1.4 weights and a CUDA device; without
them they are skipped with a BLOCKED line rather than approximated.
"""
import itertools
import math

import numpy as np
import pytest
import torch

from texedit import metrics as M
from texedit import pipeline as P
from texedit.backbone import load_backbone, weights_available
from texedit.control import InjectionSchedule, should_inject
from texedit.desk import load_desk_set
from texedit.errors import LoadError
from texedit.features import KINDS, QUERY, RESIDUAL
from texedit.localization import blend_attention, blend_latents
from texedit.sampler import NoiseSchedule, add_noise, ddim_denoise, ddim_invert, ddim_step

from .conftest import ACCEPTANCE_LINES
from .oracles import blend_attention_loop, blend_latents_loop, mse_loop, psnr_loop, ssim_loop


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.checks = number, title, []

    def check(self, name: str, ok: bool, detail: str = ""):
        self.checks.append((name, bool(ok), detail))

    def finish(self):
        failed = [c for c in self.checks if not c[1]]
        status = "FAIL" if failed else "PASS"
        detail = "; ".join(f"{n} {d}".strip() for n, _, d in (failed or self.checks))
        line = f"criterion {self.number} {status}: {self.title} [{detail}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not failed, line

    def blocked(self, reason: str):
        line = f"criterion {self.number} BLOCKED: {self.title} [{reason}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        pytest.skip(line)


# 1: blending algebra

def test_criterion_1_blending_algebra():
    c = Criterion(1, "blend_attention / blend_latents vs scalar oracles, tol 1e-6, 200 instances each")
    rng = np.random.default_rng(1)
    worst_attn = worst_lat = 0.0
    exact = True
    for i in range(200):
        n, ch = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        r_s, r_t = rng.standard_normal((n, ch)), rng.standard_normal((n, ch))
        mask = (rng.random(n) < 0.5).astype(np.float64)
        convention = ("edited-inside", "verbatim")[i % 2]
        got = blend_attention(torch.from_numpy(r_s), torch.from_numpy(r_t), torch.from_numpy(mask), convention)
        ref = np.array(blend_attention_loop(r_s.tolist(), r_t.tolist(), mask.tolist(), convention))
        worst_attn = max(worst_attn, float(np.abs(got.numpy() - ref).max()))

        cz, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 17)), int(rng.integers(1, 17))
        z_t, z_s = rng.standard_normal((cz, h, w)), rng.standard_normal((cz, h, w))
        m2 = (rng.random((h, w)) < 0.5).astype(np.float64)
        got = blend_latents(torch.from_numpy(z_t), torch.from_numpy(z_s), torch.from_numpy(m2))
        ref = np.array(blend_latents_loop(z_t.tolist(), z_s.tolist(), m2.tolist()))
        worst_lat = max(worst_lat, float(np.abs(got.numpy() - ref).max()))

        ts, tt = torch.from_numpy(r_s), torch.from_numpy(r_t)
        exact &= torch.equal(blend_attention(ts, tt, torch.ones(n)), tt)
        exact &= torch.equal(blend_attention(ts, tt, torch.zeros(n)), ts)
        zt, zs = torch.from_numpy(z_t), torch.from_numpy(z_s)
        exact &= torch.equal(blend_latents(zt, zs, torch.ones(h, w)), zt)
        exact &= torch.equal(blend_latents(zt, zs, torch.zeros(h, w)), zs)
    c.check("attention", worst_attn <= 1e-6, f"max err {worst_attn:.1e}")
    c.check("latents", worst_lat <= 1e-6, f"max err {worst_lat:.1e}")
    c.check("M=1/M=0 identities", exact, "exact" if exact else "not exact")
    c.finish()


# 2: sampler algebra

def test_criterion_2_sampler_algebra(tiny, stub):
    c = Criterion(2, "add_noise / ddim_step closed forms tol 1e-5; stub invert-denoise RMS < 1e-4")
    sched = tiny.noise_schedule(50)
    # alpha-bar recurrence as an independent float loop
    running, worst = 1.0, 0.0
    for t in range(sched.num_train_timesteps):
        running *= 1.0 - float(sched.betas[t])
        worst = max(worst, abs(running - sched.alpha_bar(t)))
    c.check("abar recurrence", worst <= 1e-5, f"max err {worst:.1e}")

    g = torch.Generator().manual_seed(2)
    x0 = torch.randn(1, 4, 16, 16, generator=g, dtype=torch.float64)
    zero = torch.zeros_like(x0)
    worst_noise = worst_step = 0.0
    for t in sched.timesteps:
        a = sched.alpha_bar(t)
        worst_noise = max(worst_noise, float((add_noise(x0, t, zero, sched) - math.sqrt(a) * x0).abs().max()))
        pure = torch.randn(1, 4, 16, 16, generator=g, dtype=torch.float64)
        worst_noise = max(worst_noise, float((add_noise(zero, t, pure, sched) - math.sqrt(1 - a) * pure).abs().max()))
    for t, t_prev in sched.denoising_pairs():
        z = torch.randn(1, 4, 16, 16, generator=g, dtype=torch.float64)
        ratio = math.sqrt(sched.alpha_bar(t_prev) / sched.alpha_bar(t))
        worst_step = max(worst_step, float((ddim_step(z, zero, t, t_prev, sched) - ratio * z).abs().max()))
    c.check("add_noise eps=0 / x0=0", worst_noise <= 1e-5, f"max err {worst_noise:.1e}")
    c.check("ddim_step eps=0", worst_step <= 1e-5, f"max err {worst_step:.1e}")

    stub_sched = stub.noise_schedule(50)
    emb = stub.encode_prompt("a close-up photo of a cat")
    x0 = torch.randn(1, 4, 16, 16, generator=g)
    back = ddim_denoise(ddim_invert(x0, emb, stub, stub_sched, 1.0).final, emb, stub, stub_sched, 1.0).final
    rms = float(((back - x0) ** 2).mean().sqrt())
    c.check("invert-denoise identity", rms < 1e-4, f"RMS {rms:.1e}")
    c.finish()


# 3: schedule contract

def test_criterion_3_schedule_contract():
    c = Criterion(3, "should_inject exhaustive over 50 steps x 16 layers x all tap kinds")
    sched = InjectionSchedule()
    mismatches, total = [], 0
    for step, layer, kind in itertools.product(range(50), range(16), KINDS):
        expected = (kind == QUERY and 12 <= layer <= 15 and 0 <= step <= 39) or (kind == RESIDUAL and layer == 7)
        total += 1
        if should_inject(step, layer, kind, sched) is not expected:
            mismatches.append((step, layer, kind))
    c.check("enumeration", not mismatches, f"{total} cases, {len(mismatches)} mismatches")
    c.finish()


# 4: branch identity

def test_criterion_4_branch_identity(tiny, desk_small):
    c = Criterion(4, "tiny backbone: identity config bit-exact; all-zero mask equals reconstruction")
    steps = 50
    bit_exact = 0
    for item in desk_small:
        config = P.test_config(item.source_prompt, "golden", item.object_word, steps=steps,
                               injection=InjectionSchedule.disabled(steps), localization=False,
                               target_prompt_override=item.source_prompt, guidance_scale=1.0)
        r = P.edit(item.image, config, tiny)
        bit_exact += int(torch.equal(r.edited_latent, r.source_latent) and np.array_equal(r.edited, r.reconstruction))
    c.check("identity", bit_exact == len(desk_small), f"{bit_exact}/{len(desk_small)} bit-exact")

    item = desk_small[0]
    config = P.test_config(item.source_prompt, "golden", item.object_word, steps=steps)
    r = P.edit(item.image, config, tiny, mask=np.zeros(item.image.shape[:2], bool))
    decoded_gap = float((tiny.decode_latent(r.edited_latent) - tiny.decode_latent(r.source_latent)).abs().max())
    lsb = int(np.abs(r.edited.astype(int) - r.reconstruction.astype(int)).max())
    c.check("M=0", decoded_gap <= 1e-6 and lsb == 0, f"decoded max diff {decoded_gap:.1e}, uint8 max diff {lsb}")
    c.finish()


# 5: metric oracles

def test_criterion_5_metric_oracles(desk_small):
    c = Criterion(5, "PSNR/MSE/SSIM vs brute force tol 1e-6 on 16x16; structure identity = 0; mask-interior invariance")
    rng = np.random.default_rng(5)
    worst = {"mse": 0.0, "psnr": 0.0, "ssim": 0.0}
    invariant = True
    for _ in range(20):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        mask = rng.random((16, 16)) < 0.3
        mask[8, 8] = False
        bg = ~mask
        worst["mse"] = max(worst["mse"], abs(M.mse_background(a, b, mask) - mse_loop(a, b, bg)))
        worst["psnr"] = max(worst["psnr"], abs(M.psnr_background(a, b, mask) - psnr_loop(a, b, bg)))
        worst["ssim"] = max(worst["ssim"], abs(M.ssim_background(a, b, mask) - ssim_loop(a, b, bg)))
        b2 = np.where(mask[..., None], rng.random(b.shape) * 10 - 5, b)
        invariant &= M.mse_background(a, b, mask) == M.mse_background(a, b2, mask)
        invariant &= M.psnr_background(a, b, mask) == M.psnr_background(a, b2, mask)
        invariant &= abs(M.ssim_background(a, b, mask) - M.ssim_background(a, b2, mask)) <= 1e-12
    for name, err in worst.items():
        c.check(name, err <= 1e-6, f"max err {err:.1e}")
    c.check("interior invariance", invariant)

    try:
        extractor, source = M.ViTKeyExtractor.pretrained(), "DINO ViT-B/8"
    except LoadError:
        extractor, source = M.ViTKeyExtractor.random(0), "random ViT test double (DINO weights unavailable)"
    img = desk_small[1].image
    d = M.structure_distance(img, img.copy(), extractor)
    c.check("structure identity", d == 0.0, f"{d} with {source}")
    c.finish()


# 6-8: desk scale with Stable Diffusion v1.4

def _desk_scale_ready(criterion: Criterion):
    if not torch.cuda.is_available():
        criterion.blocked("needs a CUDA device; none present")
    if not weights_available("sd-v1.4"):
        criterion.blocked("needs Stable Diffusion v1.4 weights in the local cache; not present")


@pytest.fixture(scope="module")
def sd_handle():
    return load_backbone("sd-v1.4", device="cuda")


@pytest.fixture(scope="module")
def desk_full():
    return load_desk_set()


def _sd_config(item, texture, **kw):
    return P.EditConfig(item.source_prompt, texture, item.object_word, steps=50, **kw)


@pytest.mark.slow
@pytest.mark.weights
def test_criterion_6_reconstruction_psnr(request):
    c = Criterion(6, "SD v1.4 DDIM reconstruction, 50 steps, guidance 1.0: mean PSNR >= 25 dB on the desk set")
    _desk_scale_ready(c)
    handle, desk = request.getfixturevalue("sd_handle"), request.getfixturevalue("desk_full")
    psnrs = [M.psnr_background(P.reconstruct(it.image, _sd_config(it, it.textures[0]), handle), it.image)
             for it in desk]
    mean = float(np.mean(psnrs))
    c.check("mean PSNR", mean >= 25.0, f"{mean:.2f} dB ({', '.join(f'{p:.1f}' for p in psnrs)})")
    c.finish()


@pytest.fixture(scope="module")
def evaluator():
    return M.Evaluator.pretrained(strict=True)


def _evaluator_or_block(request, c: Criterion):
    try:
        return request.getfixturevalue("evaluator")
    except LoadError as exc:
        c.blocked(f"metric networks unavailable: {exc}")


@pytest.mark.slow
@pytest.mark.weights
def test_criterion_7_edit_quality(request):
    c = Criterion(7, "golden/cloud edits: CLIP edited > input on >= 4/5 per texture; bg PSNR > 25, SSIM > 0.85, "
                     "structure < 40e-3")
    _desk_scale_ready(c)
    ev = _evaluator_or_block(request, c)
    handle, desk = request.getfixturevalue("sd_handle"), request.getfixturevalue("desk_full")
    rows = []
    for texture in ("golden", "cloud"):
        wins = 0
        for it in desk:
            edited = P.edit(it.image, _sd_config(it, texture), handle).edited
            row = ev.evaluate(f"{it.name}-{texture}", it.image, edited, it.mask, texture)
            wins += int(row.clip > row.clip_source)
            rows.append(row)
        c.check(f"CLIP {texture}", wins >= 4, f"{wins}/{len(desk)}")
    mean = M.MetricsReport(rows).mean()
    c.check("bg PSNR", mean.psnr > 25.0, f"{mean.psnr:.2f} dB")
    c.check("bg SSIM", mean.ssim > 0.85, f"{mean.ssim:.3f}")
    c.check("structure", mean.structure < 40e-3, f"{mean.structure * 1e3:.2f}e-3")
    c.finish()


@pytest.mark.slow
@pytest.mark.weights
def test_criterion_8_ablation_ordering(request):
    c = Criterion(8, "mean structure distance: no injection > query only > query + residual")
    _desk_scale_ready(c)
    ev = _evaluator_or_block(request, c)
    handle, desk = request.getfixturevalue("sd_handle"), request.getfixturevalue("desk_full")
    variants = {
        "none": InjectionSchedule.scaled(50, inject_queries=False, inject_residuals=False),
        "query": InjectionSchedule.scaled(50, inject_residuals=False),
        "query+residual": InjectionSchedule.scaled(50),
    }
    means = {}
    for name, sched in variants.items():
        dists = []
        for it in desk:
            for texture in it.textures:
                edited = P.edit(it.image, _sd_config(it, texture, injection=sched), handle).edited
                dists.append(M.structure_distance(edited, it.image, ev.structure_extractor))
        means[name] = float(np.mean(dists))
    detail = ", ".join(f"{k} {v * 1e3:.2f}e-3" for k, v in means.items())
    c.check("ordering", means["none"] > means["query"] > means["query+residual"], detail)
    c.finish()
