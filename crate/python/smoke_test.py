"""Smoke test for the crackscan_py extension.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/crackscan_py-*.whl
"""

import json
import math
import tempfile

import crackscan_py as cs


def camera(yaw=1.0, pitch=2.0, roll=0.5):
    return cs.CameraModel(1200.0, 1200.0, 1032.0, 772.0, 2064, 1544, yaw, pitch, roll, (1.2, 0.0, 1.5))


def check_geometry():
    cam = camera()
    u, v = cam.project(12.0, -1.5, 0.0)
    x, y, z = cam.back_project(u, v)
    assert abs(x - 12.0) < 1e-6 and abs(y + 1.5) < 1e-6 and abs(z) < 1e-9
    assert abs(cam.pixels_per_meter(21.2, 0.0, 0.0) - 60.0) < 1.0

    site = cs.GeoPoint(42.2936, -83.7166, 250.0)
    ahead = site.offset(0.0, 10.0, 0.0)
    e, n, _ = ahead.enu_from(site)
    assert abs(e) < 1e-6 and abs(n - 10.0) < 1e-6
    fx, fy, _ = ahead.to_vehicle(site, 0.0)
    assert abs(fx - 10.0) < 1e-6 and abs(fy) < 1e-6

    window = cs.compute_crop_window(u, v, 512, 512, 2064, 1544)
    assert window[2] - window[0] == 512
    cu, cv = (window[0] + window[2]) / 2, (window[1] + window[3]) / 2
    oog, aot = cs.alignment(window, (cu, cv, 40.0, 40.0))
    assert oog == 1.0 and abs(aot - 1 / math.sqrt(2)) < 1e-9

    try:
        cs.GeoPoint(95.0, 0.0, 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("latitude 95 accepted")


def check_calibration():
    truth = camera(2.0, -1.0, 0.0)
    samples = cs.synth_calibration(truth, cs.GeoPoint(42.3, -83.7, 260.0), 8, 4)
    report = json.loads(cs.calibrate(samples, truth.with_angles(0.0, 0.0, 0.0)))
    a = report["angles"]
    assert abs(a["yaw_deg"] - 2.0) <= 1 and abs(a["pitch_deg"] + 1.0) <= 1 and abs(a["roll_deg"]) <= 1, a


def check_metrics():
    gt = [[i % 3 == 0 for i in range(16)] for _ in range(2)]
    pred = [[1.0 if b else 0.0 for b in g] for g in gt]
    m = cs.evaluate(pred, gt, 4, 4)
    assert m["ods_f1"] == 1.0 and m["ois_f1"] == 1.0 and m["ap"] == 1.0
    wbce, dice, combined = cs.losses([0.0], [True], 1, 1)
    assert abs(wbce - 5 * math.log(2)) < 1e-12 and abs(dice - 0.2) < 1e-12
    assert abs(combined - (0.7 * wbce + 0.3 * dice)) < 1e-12


def check_protocol():
    r = cs.simulate()
    assert r.outcome == "completed" and r.length_m == 3.24
    a = cs.simulate(drop=0.3, delay_min=0.005, delay_max=0.05, seed=7, max_retries=50)
    b = cs.simulate(drop=0.3, delay_min=0.005, delay_max=0.05, seed=7, max_retries=50)
    assert a.transcript == b.transcript
    msg = {"seq": 3, "sender_id": 100, "body": {"kind": "result_ack", "crack_id": 9}}
    wire = cs.encode_message(json.dumps(msg))
    assert json.loads(cs.decode_message(bytes(wire))) == msg
    try:
        cs.decode_message(b"\x00\x01")
    except ValueError:
        pass
    else:
        raise AssertionError("truncated buffer decoded")


def check_pipeline():
    with tempfile.TemporaryDirectory() as d:
        n = cs.synth_session(d + "/s", camera(), cs.GeoPoint(42.2936, -83.7166, 250.0))
        assert n == 12
        report = json.loads(cs.process_session(d + "/s", d + "/out"))
        err = abs(report["length"]["length_m"] - 3.24) / 3.24
        assert err <= 0.02, report
        mask = cs.blackhat_mask([160] * 100 + [40] * 10 + [160] * 90, 20, 10, 5, 30)
        assert sum(mask) == 10


if __name__ == "__main__":
    for check in (check_geometry, check_calibration, check_metrics, check_protocol, check_pipeline):
        check()
        print(f"ok  {check.__name__}")
    print("smoke test passed")
