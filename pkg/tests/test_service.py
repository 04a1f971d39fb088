"""HTTP session API: lifecycle, edits, exports, and linearizability."""

import base64
import threading

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from invcomp import images
from invcomp.datagen import AugmentConfig, make_sample
from invcomp.rim import IterationConfig, RimNet
from invcomp.service import create_app

AUG = AugmentConfig(base_size=96, resize_size=64, crop=48, dilation_range=(1, 4), seed=77)


def png_b64(arr, bits=16):
    return base64.b64encode(images.encode_png(arr, bits=bits)).decode()


@pytest.fixture(scope="module")
def client():
    net = RimNet(seed=42)
    app = create_app(net, IterationConfig(iterations=5))
    with TestClient(app) as c:
        yield c


@pytest.fixture()
def sample():
    return make_sample(AUG, 5)


def create(client, sample, **extra):
    body = {
        "image": png_b64(sample.image),
        "alpha": png_b64(sample.initial_alpha),
        **extra,
    }
    r = client.post("/sessions", json=body)
    assert r.status_code == 200, r.text
    return r.json()


class TestLifecycle:
    def test_create_returns_id_and_initial_state(self, client, sample):
        state = create(client, sample)
        assert state["iteration"] == 0
        assert state["revision"] == 0
        r = client.get(f"/sessions/{state['id']}")
        assert r.status_code == 200
        assert r.json()["iteration"] == 0

    def test_alpha_out_of_range_is_rejected(self, client, sample):
        # an 8-bit png cannot encode >1 values, so corrupt dimensions instead:
        bad_alpha = sample.initial_alpha[:-4]
        r = client.post(
            "/sessions",
            json={"image": png_b64(sample.image), "alpha": png_b64(bad_alpha)},
        )
        assert r.status_code == 422
        body = r.json()
        assert body["code"] == "dimension_mismatch"
        assert "alpha" in body["message"]

    def test_unknown_session_404(self, client):
        r = client.get("/sessions/deadbeef")
        assert r.status_code == 404
        assert r.json()["code"] == "not_found"

    def test_delete_removes_session(self, client, sample):
        state = create(client, sample)
        assert client.delete(f"/sessions/{state['id']}").status_code == 200
        assert client.get(f"/sessions/{state['id']}").status_code == 404

    def test_multipart_upload_matches_base64(self, client, sample):
        files = {
            "image": ("image.png", images.encode_png(sample.image, bits=16), "image/png"),
            "alpha": ("alpha.png", images.encode_png(sample.initial_alpha, bits=16), "image/png"),
        }
        r = client.post("/sessions", files=files)
        assert r.status_code == 200, r.text
        via_json = create(client, sample)
        assert r.json()["state_hash"] == via_json["state_hash"]

    def test_identical_sessions_evolve_identically(self, client, sample):
        s1 = create(client, sample)
        s2 = create(client, sample)
        for sid in (s1["id"], s2["id"]):
            client.post(f"/sessions/{sid}/step", json={"n": 3})
        h1 = client.get(f"/sessions/{s1['id']}").json()["state_hash"]
        h2 = client.get(f"/sessions/{s2['id']}").json()["state_hash"]
        assert h1 == h2


class TestStep:
    def test_five_steps_match_run_inference(self, client, sample):
        from invcomp.compositing import init_state
        from invcomp.images import chw
        from invcomp.rim import run_inference

        state = create(client, sample)
        r = client.post(f"/sessions/{state['id']}/step", json={"n": 5})
        assert r.json()["iteration"] == 5
        exported = client.get(
            f"/sessions/{state['id']}/export", params={"what": "alpha", "bits": 16}
        )
        served_alpha = images.decode_png(exported.content)

        net = RimNet(seed=42)
        image = chw(sample.image)
        # session alpha0 went through a 16-bit png round trip; mirror that
        alpha0 = images.decode_png(images.encode_png(sample.initial_alpha, bits=16))
        x0 = init_state(image, None, chw(alpha0))
        with torch.no_grad():
            traj = run_inference(image, x0, net, IterationConfig(iterations=5))
        direct_alpha = images.hwc(traj.final().alpha)
        assert np.abs(served_alpha - direct_alpha).max() <= 1.0 / 65535 + 1e-6

    def test_zero_steps_no_change(self, client, sample):
        state = create(client, sample)
        before = client.get(f"/sessions/{state['id']}").json()["state_hash"]
        r = client.post(f"/sessions/{state['id']}/step", json={"n": 0})
        assert r.json()["state_hash"] == before
        assert r.json()["revision"] == state["revision"]


class TestEdit:
    def _edit_body(self, sample, target="background", value=0.25):
        h, w = sample.alpha.shape
        mask = np.zeros((h, w), dtype=np.float32)
        mask[10:20, 12:22] = 1.0
        if target == "alpha":
            values = np.full((h, w), value, dtype=np.float32)
        else:
            values = np.full((h, w, 3), value, dtype=np.float32)
        return {
            "target": target,
            "mask": png_b64(mask, bits=8),
            "values": png_b64(values),
        }, mask

    def test_edit_read_back_exact(self, client, sample):
        state = create(client, sample)
        body, mask = self._edit_body(sample, target="foreground", value=0.25)
        r = client.post(f"/sessions/{state['id']}/edit", json=body)
        assert r.status_code == 200
        assert r.json()["edited_pixels"] == int(mask.sum())
        exported = client.get(
            f"/sessions/{state['id']}/export", params={"what": "foreground", "bits": 16}
        )
        fg = images.decode_png(exported.content)
        target_value = images.decode_png(images.encode_png(np.full((1, 1, 3), 0.25, np.float32), bits=16))[0, 0, 0]
        assert np.abs(fg[mask > 0.5] - target_value).max() <= 1.0 / 65535 + 1e-6

    def test_empty_mask_is_acknowledged_noop(self, client, sample):
        state = create(client, sample)
        h, w = sample.alpha.shape
        body = {
            "target": "alpha",
            "mask": png_b64(np.zeros((h, w), np.float32), bits=8),
            "values": png_b64(np.zeros((h, w), np.float32)),
        }
        before = client.get(f"/sessions/{state['id']}").json()["state_hash"]
        r = client.post(f"/sessions/{state['id']}/edit", json=body)
        assert r.status_code == 200
        assert r.json()["edited_pixels"] == 0
        assert client.get(f"/sessions/{state['id']}").json()["state_hash"] == before

    def test_mask_shape_mismatch_rejected(self, client, sample):
        state = create(client, sample)
        h, w = sample.alpha.shape
        body = {
            "target": "alpha",
            "mask": png_b64(np.ones((h + 2, w), np.float32), bits=8),
            "values": png_b64(np.zeros((h, w), np.float32)),
        }
        r = client.post(f"/sessions/{state['id']}/edit", json=body)
        assert r.status_code == 422

    def test_background_edit_propagates_to_foreground(self, client, sample):
        # paired runs: after a background edit plus two steps, the foreground
        # near the mask must differ from the unedited run
        plain = create(client, sample)
        edited = create(client, sample)
        body, mask = self._edit_body(sample, target="background", value=0.9)
        client.post(f"/sessions/{plain['id']}/step", json={"n": 2})
        client.post(f"/sessions/{edited['id']}/edit", json=body)
        client.post(f"/sessions/{edited['id']}/step", json={"n": 2})
        fg_plain = images.decode_png(
            client.get(f"/sessions/{plain['id']}/export", params={"what": "foreground", "bits": 16}).content
        )
        fg_edited = images.decode_png(
            client.get(f"/sessions/{edited['id']}/export", params={"what": "foreground", "bits": 16}).content
        )
        region = mask > 0.5
        diff = np.abs(fg_plain[region] - fg_edited[region]).mean()
        # random weights give an arbitrary (small) response magnitude; the
        # acceptance suite asserts the 1e-3 threshold on the trained model
        assert diff > 1e-4


class TestExport:
    def test_composite_on_original_background_reproduces_image(self, client, sample):
        # a perfectly converged state is simulated by editing ground truth in
        from invcomp.compositing import TRIMAP_UNKNOWN

        state = create(client, sample)
        h, w = sample.alpha.shape
        full = np.ones((h, w), np.float32)
        for target, values in (
            ("foreground", sample.fg),
            ("background", sample.bg),
            ("alpha", sample.alpha),
        ):
            client.post(
                f"/sessions/{state['id']}/edit",
                json={"target": target, "mask": png_b64(full, bits=8), "values": png_b64(values)},
            )
        r = client.get(f"/sessions/{state['id']}/export", params={"what": "composite"})
        composite = images.decode_png(r.content)
        assert np.abs(composite - sample.image).max() <= 2.0 / 255

    def test_composite_on_black_is_alpha_times_fg(self, client, sample):
        state = create(client, sample)
        client.post(f"/sessions/{state['id']}/step", json={"n": 1})
        comp = images.decode_png(
            client.get(
                f"/sessions/{state['id']}/export",
                params={"what": "composite", "bg": "black", "bits": 16},
            ).content
        )
        fg = images.decode_png(
            client.get(f"/sessions/{state['id']}/export", params={"what": "foreground", "bits": 16}).content
        )
        alpha = images.decode_png(
            client.get(f"/sessions/{state['id']}/export", params={"what": "alpha", "bits": 16}).content
        )
        assert np.abs(comp - alpha[..., None] * fg).max() <= 2.0 / 255

    def test_binary_alpha_exports_binary(self, client, sample):
        state = create(client, sample)
        h, w = sample.alpha.shape
        binary = (sample.alpha > 0.5).astype(np.float32)
        client.post(
            f"/sessions/{state['id']}/edit",
            json={
                "target": "alpha",
                "mask": png_b64(np.ones((h, w), np.float32), bits=8),
                "values": png_b64(binary),
            },
        )
        alpha = images.decode_png(
            client.get(f"/sessions/{state['id']}/export", params={"what": "alpha"}).content
        )
        assert set(np.unique(alpha)) <= {0.0, 1.0}

    def test_previews_available(self, client, sample):
        state = create(client, sample)
        for layer, url in state["previews"].items():
            r = client.get(url)
            assert r.status_code == 200, layer
            assert r.headers["content-type"] == "image/png"


class TestReset:
    def test_reset_restores_initial_state(self, client, sample):
        state = create(client, sample)
        initial_hash = state["state_hash"]
        client.post(f"/sessions/{state['id']}/step", json={"n": 5})
        r = client.post(f"/sessions/{state['id']}/reset")
        assert r.json()["state_hash"] == initial_hash
        assert r.json()["iteration"] == 0

    def test_reset_idempotent(self, client, sample):
        state = create(client, sample)
        h1 = client.post(f"/sessions/{state['id']}/reset").json()["state_hash"]
        h2 = client.post(f"/sessions/{state['id']}/reset").json()["state_hash"]
        assert h1 == h2

    def test_step_reset_step_equals_fresh_step(self, client, sample):
        state = create(client, sample)
        client.post(f"/sessions/{state['id']}/step", json={"n": 1})
        client.post(f"/sessions/{state['id']}/reset")
        h_after = client.post(f"/sessions/{state['id']}/step", json={"n": 1}).json()["state_hash"]
        fresh = create(client, sample)
        h_fresh = client.post(f"/sessions/{fresh['id']}/step", json={"n": 1}).json()["state_hash"]
        assert h_after == h_fresh


class TestServeCommand:
    def test_cli_serve_round_trip(self, tmp_path, sample):
        """Spawn the real server process and drive one session over HTTP."""
        import socket
        import subprocess
        import sys
        import time

        import httpx

        from invcomp.rim import RimNet
        from invcomp.training import save_checkpoint

        ckpt = tmp_path / "w.rimw"
        save_checkpoint(ckpt, RimNet(seed=1))
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        proc = subprocess.Popen(
            [sys.executable, "-m", "invcomp.cli", "serve",
             "--checkpoint", str(ckpt), "--port", str(port)],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
        base = f"http://127.0.0.1:{port}"
        try:
            for _ in range(100):
                try:
                    httpx.get(base + "/sessions/none", timeout=1.0)
                    break
                except httpx.TransportError:
                    time.sleep(0.2)
            r = httpx.post(
                base + "/sessions",
                json={"image": png_b64(sample.image), "alpha": png_b64(sample.initial_alpha)},
                timeout=30.0,
            )
            assert r.status_code == 200
            sid = r.json()["id"]
            r = httpx.get(f"{base}/sessions/{sid}", timeout=30.0)
            assert r.status_code == 200
            assert r.json()["iteration"] == 0
        finally:
            proc.terminate()
            proc.wait(timeout=10)


class TestLinearizability:
    def test_concurrent_ops_match_recorded_order(self, client, sample):
        state = create(client, sample)
        sid = state["id"]
        h, w = sample.alpha.shape
        mask = np.zeros((h, w), np.float32)
        mask[4:14, 4:14] = 1.0
        edit_body = {
            "target": "background",
            "mask": png_b64(mask, bits=8),
            "values": png_b64(np.full((h, w, 3), 0.8, np.float32)),
        }

        def do_step():
            client.post(f"/sessions/{sid}/step", json={"n": 1})

        def do_edit():
            client.post(f"/sessions/{sid}/edit", json=edit_body)

        def do_reset():
            client.post(f"/sessions/{sid}/reset")

        ops = [do_step, do_step, do_edit, do_step, do_reset, do_step, do_edit, do_step]
        threads = [threading.Thread(target=op) for op in ops]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        final_hash = client.get(f"/sessions/{sid}").json()["state_hash"]
        oplog = client.get(f"/sessions/{sid}/oplog").json()["ops"]
        assert len(oplog) == len(ops)

        # replay the recorded order sequentially on a fresh session
        replay = create(client, sample)
        for op in oplog:
            if op["kind"] == "step":
                client.post(f"/sessions/{replay['id']}/step", json=op["payload"])
            elif op["kind"] == "edit":
                client.post(f"/sessions/{replay['id']}/edit", json=op["payload"])
            else:
                client.post(f"/sessions/{replay['id']}/reset")
        replay_hash = client.get(f"/sessions/{replay['id']}").json()["state_hash"]
        assert replay_hash == final_hash
