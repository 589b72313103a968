"""CLI surface: exit codes, error envelopes, artifacts, determinism."""
import dataclasses
import hashlib
import json

import numpy as np
import pytest

from headsplat import scenes
from headsplat.adaptive import AdaptiveConfig
from headsplat.cli import main
from headsplat.guidance import save_embedding
from headsplat.pipeline import RunConfig, save_run_config
from headsplat.splats import init_from_template, load_splat_ply, \
    save_splat_ply
from headsplat.template import load_template_bundle, save_template_bundle


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_payload(err: str) -> dict:
    payload = json.loads(err.strip().splitlines()[-1])
    assert set(payload) == {"code", "message", "context"}
    return payload


@pytest.fixture(scope="module")
def small_template():
    return scenes.make_head_template(2, 0)


@pytest.fixture()
def template_bundle(tmp_path, small_template):
    path = tmp_path / "template.npz"
    save_template_bundle(path, small_template)
    return path


@pytest.fixture()
def scene_dir(tmp_path, small_template):
    directory = tmp_path / "identity"
    directory.mkdir()
    mesh = scenes.paint_identity(small_template, 0)
    save_template_bundle(directory / "gt_mesh.npz", mesh)
    save_embedding(directory / "embedding.bin", scenes.identity_embedding(0),
                   "identity_0")
    return directory


@pytest.fixture()
def tiny_config(tmp_path):
    cfg = RunConfig(width=16, height=16, batch=4, mean_fit_iters=3,
                    face_only_iters=2, total_iters=5, refine_iters=2,
                    seed=4, power_cutoff=6.0,
                    guidance_backend="photometric",
                    adaptive=AdaptiveConfig(
                        densify_start_iter=3, densify_interval=2,
                        densify_end_iter=4, opacity_reset_interval=50,
                        final_phase_start=50, targeted_prune_interval=50,
                        disconnected_prune_interval=50,
                        prune_size_threshold=2.0))
    path = tmp_path / "config.json"
    save_run_config(cfg, path)
    return path


def write_mesh_inputs(tmp_path):
    vertices, faces = scenes.icosphere(0)
    obj = ["v %f %f %f" % tuple(v) for v in vertices]
    obj += ["f %d %d %d" % tuple(f + 1) for f in faces]
    mesh = tmp_path / "head.obj"
    mesh.write_text("\n".join(obj) + "\n")
    mask = tmp_path / "face.txt"
    mask.write_text("\n".join(str(i) for i in range(4)) + "\n")
    blend = tmp_path / "shapes.npy"
    rng = np.random.default_rng(0)
    np.save(blend, 0.01 * rng.standard_normal((vertices.shape[0] * 3, 2)))
    return mesh, mask, blend


def test_no_command_is_a_validation_error(capsys):
    code, _, err = run_cli(capsys)
    assert code == 2
    assert error_payload(err)["code"] == "config"


def test_unknown_flag_is_a_validation_error(capsys):
    code, _, err = run_cli(capsys, "export", "--cloud", "x.ply",
                           "--out", "y.ply", "--frobnicate")
    assert code == 2
    assert "frobnicate" in error_payload(err)["message"]


def test_prepare_template(capsys, tmp_path):
    mesh, mask, blend = write_mesh_inputs(tmp_path)
    out = tmp_path / "bundle"
    code, stdout, _ = run_cli(
        capsys, "prepare-template", "--mesh", str(mesh),
        "--blendshapes", str(blend), "--face-mask", str(mask),
        "--rounds-face", "2", "--rounds-head", "1", "--out", str(out))
    assert code == 0
    summary = json.loads(stdout)
    assert summary["v_before"] == 12
    report = json.loads((out / "subdivision_report.json").read_text())
    assert report["v_after"] == summary["v_after"]
    bundle = load_template_bundle(out / "template.npz")
    assert bundle.n_vertices == summary["v_after"]
    assert bundle.n_blendshapes == 2


def test_prepare_template_missing_mask_names_path(capsys, tmp_path):
    mesh, _, _ = write_mesh_inputs(tmp_path)
    missing = tmp_path / "absent_mask.txt"
    code, _, err = run_cli(
        capsys, "prepare-template", "--mesh", str(mesh),
        "--face-mask", str(missing), "--out", str(tmp_path / "b"))
    assert code == 2
    payload = error_payload(err)
    assert payload["context"]["path"] == str(missing)


def test_prepare_template_rejects_negative_rounds(capsys, tmp_path):
    mesh, mask, _ = write_mesh_inputs(tmp_path)
    code, _, err = run_cli(
        capsys, "prepare-template", "--mesh", str(mesh),
        "--face-mask", str(mask), "--rounds-face", "-1",
        "--out", str(tmp_path / "b"))
    assert code == 2
    assert error_payload(err)["code"] == "config"


def test_missing_config_names_path(capsys, tmp_path, template_bundle):
    code, _, err = run_cli(
        capsys, "fit-mean", "--config", str(tmp_path / "nope.json"),
        "--template", str(template_bundle), "--out", str(tmp_path / "fit"))
    assert code == 2
    assert "nope.json" in error_payload(err)["context"]["path"]


def test_fit_mean_writes_artifacts(capsys, tmp_path, template_bundle,
                                   tiny_config):
    out = tmp_path / "fit"
    code, stdout, _ = run_cli(
        capsys, "fit-mean", "--config", str(tiny_config),
        "--template", str(template_bundle), "--out", str(out))
    assert code == 0
    summary = json.loads(stdout)
    assert summary["iterations"] == 3
    assert (out / "mean_fit.ply").is_file()
    log = [json.loads(line)
           for line in (out / "fit_log.jsonl").read_text().splitlines()]
    assert len(log) == 3 and log[0]["phase"] == "mean_fit"


def test_generate_writes_artifacts_and_is_seed_deterministic(
        capsys, tmp_path, template_bundle, scene_dir, tiny_config):
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, stdout, _ = run_cli(
            capsys, "generate", "--config", str(tiny_config),
            "--template", str(template_bundle), "--scene", str(scene_dir),
            "--seed", "9", "--out", str(out))
        assert code == 0
        summary = json.loads(stdout)
        assert summary["iterations"] == 5
        assert (out / "turntable.png").is_file()
        assert (out / "train_log.jsonl").is_file()
        hashes.append(hashlib.sha256(
            (out / "avatar.ply").read_bytes()).hexdigest())
    assert hashes[0] == hashes[1]


def test_generate_with_embeddings(capsys, tmp_path, template_bundle,
                                  scene_dir, tiny_config):
    views = tmp_path / "views"
    views.mkdir()
    for bucket, emb in scenes.view_embedding_set().items():
        save_embedding(views / f"{bucket}.bin", emb, bucket)
    out = tmp_path / "gen"
    code, _, _ = run_cli(
        capsys, "generate", "--config", str(tiny_config),
        "--template", str(template_bundle), "--scene", str(scene_dir),
        "--identity-embedding", str(scene_dir / "embedding.bin"),
        "--view-embeddings", str(views), "--out", str(out))
    assert code == 0


def test_generate_rejects_unknown_backend(capsys, tmp_path, template_bundle,
                                          scene_dir):
    cfg = RunConfig(width=16, height=16, total_iters=2, face_only_iters=1,
                    mean_fit_iters=1)
    bad = dataclasses.replace(cfg, guidance_backend="arc2face")
    path = tmp_path / "bad.json"
    save_run_config(bad, path)
    code, _, err = run_cli(
        capsys, "generate", "--config", str(path),
        "--template", str(template_bundle), "--scene", str(scene_dir),
        "--out", str(tmp_path / "out"))
    assert code == 2
    payload = error_payload(err)
    assert payload["code"] == "config"
    assert "arc2face" in json.dumps(payload)


def test_generate_rejects_malformed_config(capsys, tmp_path, template_bundle,
                                           scene_dir):
    path = tmp_path / "broken.json"
    path.write_text(json.dumps({"total_iters": 5, "widht": 16}))
    code, _, err = run_cli(
        capsys, "generate", "--config", str(path),
        "--template", str(template_bundle), "--scene", str(scene_dir),
        "--out", str(tmp_path / "out"))
    assert code == 2
    assert "widht" in json.dumps(error_payload(err))


@pytest.fixture()
def small_cloud_ply(tmp_path, small_template):
    cloud = init_from_template(small_template)
    path = tmp_path / "cloud.ply"
    save_splat_ply(cloud, path)
    return path


def test_express_inline_coefficients(capsys, tmp_path, template_bundle,
                                     small_cloud_ply, tiny_config):
    out = tmp_path / "expr"
    code, stdout, _ = run_cli(
        capsys, "express", "--cloud", str(small_cloud_ply),
        "--template", str(template_bundle), "--config", str(tiny_config),
        "--coefficients", "0.25,0.0", "--out", str(out))
    assert code == 0
    assert json.loads(stdout)["refined"] is False
    assert (out / "expression.ply").is_file()


def test_express_coefficient_file_and_refine(capsys, tmp_path,
                                             template_bundle, scene_dir,
                                             small_cloud_ply, tiny_config):
    coeff = tmp_path / "coeff.json"
    coeff.write_text(json.dumps({"coefficients": [0.4, 0.1]}))
    out = tmp_path / "expr"
    code, stdout, _ = run_cli(
        capsys, "express", "--cloud", str(small_cloud_ply),
        "--template", str(template_bundle), "--config", str(tiny_config),
        "--coefficients", str(coeff), "--refine", "--scene", str(scene_dir),
        "--out", str(out))
    assert code == 0
    summary = json.loads(stdout)
    assert summary["refined"] is True and summary["iterations"] == 2
    assert (out / "refine_log.jsonl").is_file()


def test_express_validation_errors(capsys, tmp_path, template_bundle,
                                   small_cloud_ply, tiny_config):
    code, _, err = run_cli(
        capsys, "express", "--cloud", str(small_cloud_ply),
        "--template", str(template_bundle), "--config", str(tiny_config),
        "--coefficients", "a,b", "--out", str(tmp_path / "x"))
    assert code == 2 and error_payload(err)["code"] == "config"
    code, _, err = run_cli(
        capsys, "express", "--cloud", str(small_cloud_ply),
        "--template", str(template_bundle), "--config", str(tiny_config),
        "--coefficients", "0.5,0.0", "--refine",
        "--out", str(tmp_path / "x"))
    assert code == 2
    assert "--scene" in error_payload(err)["message"]


def test_render_turntable_and_pose_list(capsys, tmp_path, small_cloud_ply,
                                        tiny_config):
    out = tmp_path / "frames"
    code, stdout, _ = run_cli(
        capsys, "render", "--cloud", str(small_cloud_ply),
        "--config", str(tiny_config), "--turntable", "3", "--out", str(out))
    assert code == 0
    assert len(json.loads(stdout)["frames"]) == 3
    assert (out / "frame_002.png").is_file()

    poses = tmp_path / "poses.json"
    scenes.save_pose_list(poses, scenes.held_out_poses(16, 16)[:2])
    out2 = tmp_path / "frames2"
    code, stdout, _ = run_cli(
        capsys, "render", "--cloud", str(small_cloud_ply),
        "--poses", str(poses), "--out", str(out2))
    assert code == 0
    assert len(json.loads(stdout)["frames"]) == 2


def test_export_writes_plain_ply(capsys, tmp_path, small_cloud_ply):
    out = tmp_path / "viewer.ply"
    code, stdout, _ = run_cli(
        capsys, "export", "--cloud", str(small_cloud_ply),
        "--format", "ply", "--out", str(out))
    assert code == 0
    assert json.loads(stdout)["ply"] == str(out)
    assert out.is_file()
    assert not out.with_suffix(".ply.correspondence.json").exists()
    restored = load_splat_ply(out)
    original = load_splat_ply(small_cloud_ply)
    np.testing.assert_array_equal(restored.positions, original.positions)


def test_export_rejects_unknown_format(capsys, tmp_path, small_cloud_ply):
    code, _, err = run_cli(
        capsys, "export", "--cloud", str(small_cloud_ply),
        "--format", "usdz", "--out", str(tmp_path / "x.usdz"))
    assert code == 2
    assert error_payload(err)["context"]["format"] == "usdz"
