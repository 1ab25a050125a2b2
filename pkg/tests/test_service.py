import json
import socket
import threading
import time

import numpy as np
import pytest
import uvicorn
from fastapi.testclient import TestClient

from texedit import cli, config as cfg, io, runner
from texedit.service import create_app
from texedit.service import schemas as S

TINY = {"model": "tiny-test-backbone", "steps": 4}


@pytest.fixture(scope="module")
def app():
    return create_app(runner.BackboneCache())


@pytest.fixture(scope="module")
def client(app):
    return TestClient(app)


@pytest.fixture(scope="module")
def image(desk_small):
    return desk_small[0].image[:64, :64]


def _edit_body(image, **settings):
    return {"image": S.encode_png(image), "settings": {
        "source_prompt": "a close-up photo of a cat", "texture": "golden", "object_word": "cat", **TINY, **settings}}


def test_png_round_trip(image):
    assert np.array_equal(S.decode_png(S.encode_png(image), "image"), image)
    m = np.zeros((8, 8), bool)
    m[2:5, 1:3] = True
    assert np.array_equal(S.decode_png(S.encode_png(m), "mask", mask=True), m)


def test_health_and_inventory(client):
    assert client.get("/health").json()["status"] == "ok"
    inv = client.get("/inventory", params={"model": "tiny-test-backbone"}).json()
    assert len(inv["layers"]) == 7 and inv["latent_size"] == [16, 16]


def test_edit_endpoint_matches_local_run(client, app, image):
    resp = client.post("/edit", json=_edit_body(image))
    assert resp.status_code == 200
    body = S.EditResponse.model_validate(resp.json())
    assert len(body.diagnostics) == 4 and body.settings.query_layers == [5, 6]
    local = runner.run_edit(cfg.resolve(body.settings), image, app.state.cache)
    assert np.array_equal(S.decode_png(body.edited, "edited"), local.edited)
    assert np.array_equal(S.decode_png(body.mask, "mask", mask=True), local.mask)


@pytest.mark.parametrize("settings,field", [
    ({"texture": "golden marble"}, "texture"),
    ({"object_word": "dog"}, "object_word"),
    ({"mask_threshold": 2.0}, "mask_threshold"),
])
def test_edit_validation_is_422_with_field(client, image, settings, field):
    resp = client.post("/edit", json=_edit_body(image, **settings))
    assert resp.status_code == 422
    body = resp.json()
    assert body["kind"] == "validation" and body["field"] == field


def test_bad_image_payload_is_422(client):
    resp = client.post("/edit", json={"image": "not-base64!", "settings": {"source_prompt": "x", **TINY}})
    assert resp.status_code == 422 and resp.json()["field"] == "image"


def test_unknown_settings_key_is_422(client, image):
    body = _edit_body(image)
    body["settings"]["bogus"] = 1
    assert client.post("/edit", json=body).status_code == 422


def test_runtime_failure_is_500(client, image):
    resp = client.post("/edit", json=_edit_body(image, model="/nonexistent/model/dir"))
    assert resp.status_code == 500 and resp.json()["kind"] == "runtime"


def test_reconstruct_endpoint(client, image):
    resp = client.post("/reconstruct", json={"image": S.encode_png(image),
                                             "settings": {"source_prompt": "a cat", **TINY}})
    assert resp.status_code == 200
    body = S.ReconstructResponse.model_validate(resp.json())
    assert S.decode_png(body.image, "image").shape == image.shape and body.psnr > 10


def test_evaluate_endpoint(client, desk_small):
    items = [{"name": d.name, "source": S.encode_png(d.image), "edited": S.encode_png(d.image),
              "mask": S.encode_png(d.mask), "texture": d.textures[0]} for d in desk_small[:2]]
    resp = client.post("/evaluate", json={"items": items, "networks": "test-doubles"})
    assert resp.status_code == 200
    rows = resp.json()["report"]["rows"]
    assert [r["PSNR"] for r in rows] == [100.0, 100.0]


def test_concurrent_edits_are_independent(client, image):
    # shared handle, per-call tap state: parallel requests must equal sequential ones
    bodies = [_edit_body(image, texture=t) for t in ("golden", "cloud", "golden")]
    sequential = [client.post("/edit", json=b).json()["edited"] for b in bodies]
    out = [None] * 3

    def go(i):
        out[i] = client.post("/edit", json=bodies[i]).json()["edited"]

    threads = [threading.Thread(target=go, args=(i,)) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert out == sequential


# the CLI as a thin client of a live server

@pytest.fixture(scope="module")
def server(app):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    srv = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error"))
    thread = threading.Thread(target=srv.run, daemon=True)
    thread.start()
    deadline = time.time() + 20
    while not srv.started and time.time() < deadline:
        time.sleep(0.05)
    assert srv.started
    yield f"http://127.0.0.1:{port}"
    srv.should_exit = True
    thread.join(timeout=10)


def _cli_args(image_file, out, server, *extra):
    return ["edit", "--image", str(image_file), "--source-prompt", "a close-up photo of a cat", "--texture", "golden",
            "--object-word", "cat", "--out", str(out), "--model", "tiny-test-backbone", "--steps", "4",
            "--server", server, *extra]


def test_cli_server_mode_matches_local(tmp_path, image, server):
    image_file = tmp_path / "in.png"
    io.write_image(image_file, image)
    remote_out, local_out = tmp_path / "remote.png", tmp_path / "local.png"
    assert cli.main(_cli_args(image_file, remote_out, server)) == 0
    local = [a for a in _cli_args(image_file, local_out, server) if a not in ("--server", server)]
    assert cli.main(local) == 0
    assert np.array_equal(io.read_image(remote_out), io.read_image(local_out))
    manifest = json.loads(cfg.manifest_path(remote_out).read_text())
    assert manifest["config"]["texture"] == "golden"


def test_cli_server_validation_exit_2(tmp_path, image, server, capsys):
    image_file = tmp_path / "in.png"
    io.write_image(image_file, image)
    args = _cli_args(image_file, tmp_path / "o.png", server)
    args[args.index("golden")] = "golden marble"
    assert cli.main(args) == 2
    assert "--texture" in capsys.readouterr().err


def test_cli_server_reconstruct(tmp_path, image, server, capsys):
    image_file = tmp_path / "in.png"
    io.write_image(image_file, image)
    args = ["reconstruct", "--image", str(image_file), "--source-prompt", "a cat", "--out", str(tmp_path / "r.png"),
            "--model", "tiny-test-backbone", "--steps", "4", "--server", server]
    assert cli.main(args) == 0
    assert "PSNR vs input:" in capsys.readouterr().out


def test_cli_unreachable_server_exit_3(tmp_path, image, capsys):
    image_file = tmp_path / "in.png"
    io.write_image(image_file, image)
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    assert cli.main(_cli_args(image_file, tmp_path / "o.png", f"http://127.0.0.1:{port}")) == 3
    assert "unreachable" in capsys.readouterr().err
