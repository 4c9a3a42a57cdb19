"""End-to-end acceptance checks; each test is tagged with the criterion it verifies.

A summary line per criterion is printed at the end of the pytest run.
"""
import json
import math
import shutil
import time

import numpy as np
import pytest
import torch
from torch.func import functional_call

from nerfdistill.camera import PosePrior, pose_angles, sample_latents, sample_pose_batch
from nerfdistill.checkpoint import load_container
from nerfdistill.cli import main as cli_main
from nerfdistill.discriminator import DualDiscriminator
from nerfdistill.evaluation.bench import benchmark_efficiency, max_feasible_batch, throughput_at
from nerfdistill.evaluation.metrics import fid, kid, mean_psnr
from nerfdistill.evaluation.pose import angle_variance, fit_pose_regressor, pose_accuracy
from nerfdistill.evaluation.suite import image_fn
from nerfdistill.losses import PerceptualLoss, adversarial_d, perceptual_loss, smooth_l1
from nerfdistill.rendering import RenderConfig, composite, stratified_samples
from nerfdistill.student import DistilledGenerator, StudentConfig, build_student
from nerfdistill.teacher import TeacherConfig, build_teacher, load_checkpoint, teacher_forward
from nerfdistill.trainer import (Batch, ImagePool, TrainConfig, TrainState, build_models, make_sample, mix_real_batch,
                                 probe_psnr, run_distillation, train_step)
from nerfdistill.triplane import TriPlanes, query_triplane

from conftest import tiny_teacher_config
from oracles import blob_centroid_errors, brute_force_bilinear, fine_grid_alpha

f64 = torch.float64
slow = pytest.mark.slow


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# -- 1 ------------------------------------------------------------------------

C1 = criterion(1, "volumetric oracle: constant-density alpha and interval-split invariance")


@C1
def test_c1_constant_density_alpha():
    start = time.perf_counter()
    o, d = torch.zeros(1, 1, 3, dtype=f64), torch.tensor([[[0.0, 0.0, 1.0]]], dtype=f64)
    for sigma in (0.1, 0.5, 1.0, 2.0, 5.0, 10.0):
        exact = 1.0 - math.exp(-sigma)
        assert abs(fine_grid_alpha(sigma) - exact) < 1e-6
        for K in (8, 32, 96, 256):
            s = stratified_samples(o, d, 0.0, 1.0, K)
            _, w = composite(torch.full_like(s.depths, sigma), torch.zeros(*s.depths.shape, 1, dtype=f64), s.deltas)
            # midpoint sampling leaves out half a bin in front of the first sample
            assert -1e-6 <= fine_grid_alpha(sigma) - float(w.sum()) <= sigma / (2 * K) + 1e-6
            _, w = composite(torch.full((K,), sigma, dtype=f64), torch.zeros(K, 1, dtype=f64),
                             torch.full((K,), 1.0 / K, dtype=f64))
            assert abs(float(w.sum()) - exact) < 1e-12
    assert time.perf_counter() - start < 5.0


@C1
def test_c1_interval_split_invariance():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    sigma = torch.rand(500, 1, generator=g, dtype=f64) * 20
    delta = torch.rand(500, 1, generator=g, dtype=f64) * 2
    feat = torch.rand(500, 1, 32, generator=g, dtype=f64)
    one, _ = composite(sigma, feat, delta)
    for parts in (2, 3, 7):
        many, _ = composite(sigma.expand(-1, parts), feat.expand(-1, parts, -1), (delta / parts).expand(-1, parts))
        assert float((one - many).abs().max()) < 1e-10
    assert time.perf_counter() - start < 5.0


# -- 2 ------------------------------------------------------------------------

C2 = criterion(2, "tri-plane sampling: brute-force bilinear oracle and linearity")


@C2
def test_c2_brute_force_oracle():
    g = torch.Generator().manual_seed(1)
    planes = torch.randn(1, 3, 6, 17, 17, generator=g, dtype=f64)
    x = torch.rand(1, 10_000, 3, generator=g, dtype=f64) * 2 - 1
    got = query_triplane(TriPlanes(planes), x)[0].numpy()
    oracle = brute_force_bilinear(planes[0].numpy(), x[0].numpy())
    assert np.abs(got - oracle).max() < 1e-6


@C2
def test_c2_linearity():
    g = torch.Generator().manual_seed(2)
    A = torch.randn(2, 3, 5, 12, 12, generator=g, dtype=f64)
    B = torch.randn(2, 3, 5, 12, 12, generator=g, dtype=f64)
    x = torch.rand(2, 10_000, 3, generator=g, dtype=f64) * 2.2 - 1.1
    for a, b in ((2.0, -3.0), (0.37, 1.9), (-1e3, 1e-3)):
        lhs = query_triplane(TriPlanes(a * A + b * B), x)
        rhs = a * query_triplane(TriPlanes(A), x) + b * query_triplane(TriPlanes(B), x)
        assert float((lhs - rhs).abs().max()) < 1e-10 * max(1.0, abs(a), abs(b))


# -- 3 ------------------------------------------------------------------------

C3 = criterion(3, "gradient checks against central finite differences")


def _gradcheck(fn, inputs):
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)


@pytest.fixture(scope="module")
def c3_clock():
    return {"start": time.perf_counter()}


@C3
def test_c3_composite(c3_clock):
    g = torch.Generator().manual_seed(0)
    sigma = (torch.rand(2, 12, generator=g, dtype=f64) * 3).requires_grad_(True)
    feats = torch.rand(2, 12, 4, generator=g, dtype=f64).requires_grad_(True)
    deltas = (torch.rand(2, 12, generator=g, dtype=f64) * 0.2).requires_grad_(True)
    assert _gradcheck(composite, (sigma, feats, deltas))


@C3
def test_c3_query_triplane(c3_clock):
    g = torch.Generator().manual_seed(1)
    planes = torch.randn(1, 3, 2, 5, 5, generator=g, dtype=f64, requires_grad=True)
    x = torch.tensor([[[0.13, -0.41, 0.27], [0.6, 0.1, -0.7], [-0.33, 0.71, 0.05]]], dtype=f64, requires_grad=True)
    assert _gradcheck(lambda p, q: query_triplane(TriPlanes(p), q), (planes, x))


@C3
def test_c3_smooth_l1(c3_clock):
    g = torch.Generator().manual_seed(2)
    a = torch.randn(2, 3, 4, generator=g, dtype=f64).requires_grad_(True)
    b = torch.randn(2, 3, 4, generator=g, dtype=f64).requires_grad_(True)
    assert _gradcheck(lambda x, y: smooth_l1(x, y, 1.0), (a, b))


@C3
def test_c3_perceptual(c3_clock):
    ext = PerceptualLoss(channels=(4, 4)).double()
    g = torch.Generator().manual_seed(3)
    a = torch.rand(1, 3, 6, 6, generator=g, dtype=f64).requires_grad_(True)
    b = torch.rand(1, 3, 6, 6, generator=g, dtype=f64).requires_grad_(True)
    assert _gradcheck(lambda x, y: perceptual_loss(x, y, ext), (a, b))


@C3
def test_c3_adversarial_d(c3_clock):
    torch.manual_seed(0)
    d = DualDiscriminator(resolution=8, channels=2, channel_max=4, embed_dim=4).double()
    g = torch.Generator().manual_seed(4)
    real = torch.rand(2, 6, 8, 8, generator=g, dtype=f64)
    fake = torch.rand(2, 6, 8, 8, generator=g, dtype=f64)
    c = torch.randn(2, 25, generator=g, dtype=f64)
    names = [n for n, _ in d.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in d.parameters())

    # the D loss treats both images as constants (fake is detached, R1 re-leafs real)
    def fn(*ps):
        state = dict(zip(names, ps))

        class Bound(torch.nn.Module):
            def forward(self, img, cc):
                return functional_call(d, state, (img, cc))
        return adversarial_d(Bound(), real, fake, c, r1_gamma=1.0)

    assert _gradcheck(fn, params)
    assert time.perf_counter() - c3_clock["start"] < 120.0


# -- 4 ------------------------------------------------------------------------

C4 = criterion(4, "FID vs analytic Gaussian distance; KID unbiased at zero")


@C4
def test_c4_fid_gaussian():
    rng = np.random.default_rng(0)
    mu = np.full(8, 2.0 / math.sqrt(8))  # |mu|^2 = 4, equal covariances
    value = fid(rng.normal(size=(100_000, 8)), rng.normal(size=(100_000, 8)) + mu)
    assert abs(value - 4.0) <= 0.05 * 4.0
    x = rng.normal(size=(5000, 8))
    assert fid(x, x) < 1e-8


@C4
def test_c4_kid_unbiased():
    rng = np.random.default_rng(1)
    values = []
    for i in range(100):
        pool = rng.normal(size=(400, 8))
        values.append(kid(pool[:200], pool[200:], num_subsets=5, subset_size=100, seed=i))
    values = np.asarray(values)
    se = values.std(ddof=1) / math.sqrt(len(values))
    assert abs(values.mean()) <= 3 * se


# -- 5 ------------------------------------------------------------------------

C5 = criterion(5, "procedural teacher geometry: blob centroid within 2 px")


@C5
def test_c5_blob_centroids():
    errors = blob_centroid_errors(n_pairs=20, resolution=64, seed=0)
    assert len(errors) == 20
    assert float(np.max(errors)) < 2.0


# -- 6 ------------------------------------------------------------------------

C6 = criterion(6, "overfit one sample to 35 dB within 2000 stage-1 steps at 32->64")


@C6
@slow
def test_c6_overfit_single_sample():
    tc = TeacherConfig(kind="procedural", plane_channels=16)
    assert (tc.low_res, tc.high_res) == (32, 64)
    teacher = build_teacher(tc)
    _, _, bundle = make_sample(teacher, tc.prior, torch.Generator().manual_seed(0), 1)
    student = build_student(StudentConfig.for_teacher(tc), teacher)
    cfg = TrainConfig(batch_size=1, total_steps=2000, stage1_steps=2000)
    models = build_models(teacher, student, cfg)
    state, best = TrainState(), 0.0
    while state.step < 2000 and best < 35.0:
        train_step(state, Batch(bundle), models, cfg)
        if state.step % 50 == 0:
            best = max(best, probe_psnr(student, bundle))
    assert best >= 35.0, f"{best:.2f} dB after {state.step} steps"


# -- 10 -----------------------------------------------------------------------

C10 = criterion(10, "efficiency trend: student batch capacity and throughput vs teacher")


@C10
@slow
def test_c10_efficiency_trend(tmp_path):
    tc = TeacherConfig(kind="random", render=RenderConfig(n_coarse=48, n_fine=48))
    teacher = build_teacher(tc)
    student = DistilledGenerator(teacher, build_student(StudentConfig.for_teacher(tc), teacher).eval())
    assert student.student.superres is not teacher.superres
    for a, b in zip(student.student.superres.state_dict().values(), teacher.superres.state_dict().values()):
        assert torch.equal(a, b)
    records = benchmark_efficiency(teacher, student, [1, 2, 4, 8, 16, 32, 64], memory_budget=1 << 30, repeats=5,
                                   warmup=1, threads=1, out_dir=tmp_path, lock_path=tmp_path / "bench.lock")
    assert {r.resolution for r in records} == {tc.high_res}
    t_max = max_feasible_batch(records, "volumetric")
    s_max = max_feasible_batch(records, "convolutional")
    assert t_max >= 1
    assert s_max >= t_max
    t_tp = throughput_at(records, "volumetric", t_max)
    s_tp = throughput_at(records, "convolutional", t_max)
    assert s_tp >= 1.5 * t_tp, f"student {s_tp:.2f} img/s vs teacher {t_tp:.2f} img/s at batch {t_max}"
    for name in ("bench.csv", "bench.jsonl", "bench.png"):
        assert (tmp_path / name).stat().st_size > 0


# -- 7 ------------------------------------------------------------------------

C7 = criterion(7, "generalization: held-out PSNR >= 25 dB, pose MSE within 2x of teacher")

C7_TRAIN = dict(cache_size=2048, stage1_steps=1500, total_steps=1800, probe_size=64, probe_every=100, log_every=50,
                lr_schedule="cosine")
C7_HELDOUT = 256


@pytest.fixture(scope="module")
def c7_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("c7")
    teacher = build_teacher(TeacherConfig(kind="procedural", plane_channels=16))
    assert teacher.config.z_dim == 8
    result = run_distillation(TrainConfig(**C7_TRAIN), teacher, out_dir=out)
    # held-out (z, c) drawn from a stream the trainer never uses
    g = torch.Generator().manual_seed(987_654)
    prior = teacher.config.prior
    z = sample_latents(C7_HELDOUT, teacher.config.z_dim, g)
    c = sample_pose_batch(prior, C7_HELDOUT, g)
    return teacher, result, out, z, c


@C7
@slow
def test_c7_heldout_psnr(c7_run):
    teacher, result, _, z, c = c7_run
    teacher_img = torch.cat([image_fn(teacher)(z[i:i + 32], c[i:i + 32]) for i in range(0, len(z), 32)])
    student_img = torch.cat([image_fn(result.generator)(z[i:i + 32], c[i:i + 32]) for i in range(0, len(z), 32)])
    value = mean_psnr(student_img, teacher_img)
    assert value >= 25.0, f"held-out PSNR {value:.2f} dB"


@C7
@slow
def test_c7_pose_parity(c7_run):
    teacher, result, out, z, c = c7_run
    kind, tree, _ = load_container(out / "teacher_cache.ckpt")
    assert kind == "teacher_cache"
    regressor = fit_pose_regressor(tree["hr"], tree["c"], epochs=40, seed=0)
    assert regressor.holdout_mse < 0.1 * regressor.pose_variance
    teacher_mse = pose_accuracy(image_fn(teacher), z, c, regressor, batch=32)
    student_mse = pose_accuracy(image_fn(result.generator), z, c, regressor, batch=32)
    assert teacher_mse < 0.1 * angle_variance(pose_angles(c.double()))
    assert student_mse <= 2.0 * teacher_mse, f"student {student_mse:.5f} vs teacher {teacher_mse:.5f}"


@slow
def test_c7_stage2_keeps_reconstruction(c7_run):
    _, result, _, _, _ = c7_run
    transition = [r for r in result.history if r["event"] == "transition"]
    final = [r for r in result.history if r["event"] == "final"]
    assert len(transition) == 1 and len(final) == 1
    assert final[0]["probe_psnr"] >= transition[0]["probe_psnr"] - 0.5


# -- 8 ------------------------------------------------------------------------

C8 = criterion(8, "curriculum: stage-1 gradients independent of D; one transition")


@C8
def test_c8_stage1_gradients_ignore_discriminator(tiny_teacher):
    base = dict(batch_size=4, cache_size=8, disc_channels=4, total_steps=10)
    with_d = TrainConfig(stage1_steps=5, **base)
    without_d = TrainConfig(stage1_steps=10, **base)
    scfg = StudentConfig.for_teacher(tiny_teacher.config, style_dim=16, mapping_layers=2, channel_base=64,
                                     channel_max=16)
    ma = build_models(tiny_teacher, build_student(scfg, tiny_teacher), with_d)
    mb = build_models(tiny_teacher, build_student(scfg, tiny_teacher), without_d)
    assert ma.discriminator is not None and mb.discriminator is None
    with torch.no_grad():
        for p in ma.discriminator.parameters():
            p.add_(torch.randn_like(p))
    sa, sb = TrainState(), TrainState()
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        _, _, bundle = make_sample(tiny_teacher, tiny_teacher.config.prior, g, 4)
        train_step(sa, Batch(bundle), ma, with_d)
        train_step(sb, Batch(bundle), mb, without_d)
        for (name, pa), pb in zip(ma.student.named_parameters(), mb.student.parameters()):
            assert (pa.grad is None) == (pb.grad is None), name
            if pa.grad is not None:
                assert torch.equal(pa.grad, pb.grad), name
            assert torch.equal(pa, pb), name


@C8
def test_c8_single_transition(tiny_teacher, tmp_path):
    cfg = TrainConfig(batch_size=4, total_steps=12, stage1_steps=5, cache_size=8, real_pool_size=8, probe_size=4,
                      probe_every=2, log_every=1, disc_channels=4, r1_interval=2)
    scfg = StudentConfig.for_teacher(tiny_teacher.config, style_dim=16, mapping_layers=2, channel_base=64,
                                     channel_max=16)
    result = run_distillation(cfg, tiny_teacher, scfg, tmp_path)
    logged = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    transitions = [r for r in logged if r["event"] == "transition"]
    assert len(transitions) == 1 and transitions[0]["step"] == 5
    stages = [r["stage"] for r in logged if r["event"] == "train"]
    assert stages == [1] * 5 + [2] * 7
    assert result.state.transition_step == 5


# -- 9 ------------------------------------------------------------------------

C9 = criterion(9, "alpha-mixing: rendered fraction within 1% of 0.5")


@C9
def test_c9_alpha_mixing_fraction():
    real = ImagePool(torch.zeros(16, 3, 4, 4), torch.zeros(16, 3, 2, 2), torch.zeros(16, 25))
    rendered = ImagePool(torch.ones(16, 3, 4, 4), torch.ones(16, 3, 2, 2), torch.ones(16, 25))
    g = torch.Generator().manual_seed(0)
    count = 0
    for _ in range(10_000):
        batch, mask = mix_real_batch(real, rendered, 0.5, g, 16)
        assert torch.equal(batch.hr[:, 0, 0, 0] == 1.0, mask)
        count += int(mask.sum())
    fraction = count / (10_000 * 16)
    assert abs(fraction - 0.5) <= 0.01 * 0.5


# -- 11 -----------------------------------------------------------------------

C11 = criterion(11, "reproducibility: identical logs across runs; resume matches")


@pytest.fixture(scope="module")
def c11_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("c11")
    config = {
        "teacher": tiny_teacher_config().to_dict(),
        "student": {"style_dim": 16, "mapping_layers": 2, "channel_base": 64, "channel_max": 16},
        "train": dict(batch_size=4, total_steps=10, stage1_steps=4, cache_size=8, real_pool_size=8, probe_size=4,
                      probe_every=2, log_every=1, disc_channels=4, r1_interval=2, checkpoint_every=3,
                      deterministic=True),
    }
    cfg = root / "run.json"
    cfg.write_text(json.dumps(config))
    assert cli_main(["make-teacher", "--config", str(cfg), "--out-dir", str(root / "teacher")]) == 0
    teacher = str(root / "teacher" / "teacher.ckpt")
    for name in ("a", "b"):
        assert cli_main(["distill", "--config", str(cfg), "--teacher", teacher, "--out-dir", str(root / name)]) == 0
    return root, cfg, teacher


@C11
def test_c11_identical_logs(c11_runs):
    root, _, _ = c11_runs
    a = (root / "a" / "metrics.jsonl").read_bytes()
    assert a == (root / "b" / "metrics.jsonl").read_bytes()
    assert b'"event": "final"' in a


@C11
def test_c11_resume_matches(c11_runs):
    root, cfg, teacher = c11_runs
    shutil.copytree(root / "a", root / "resumed")
    resume = root / "resumed" / "checkpoints" / "step_0000006.ckpt"
    assert cli_main(["distill", "--config", str(cfg), "--teacher", teacher, "--out-dir", str(root / "resumed"),
                     "--resume", str(resume)]) == 0
    assert (root / "resumed" / "metrics.jsonl").read_bytes() == (root / "a" / "metrics.jsonl").read_bytes()
    full = load_checkpoint(root / "a" / "student.ckpt").student.state_dict()
    again = load_checkpoint(root / "resumed" / "student.ckpt").student.state_dict()
    assert full.keys() == again.keys()
    for k in full:
        assert torch.equal(full[k], again[k]), k
