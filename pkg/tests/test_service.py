import socket
import threading

import numpy as np
import pytest

from ownverify.desk import desk_model, desk_split
from ownverify.errors import OracleError, OracleUnreachable
from ownverify.protocol import VerificationRequest, owner_verify
from ownverify.service import (HEADER, RemoteOracle, parse_endpoint, parse_mode, publish_probs,
                               recv_message, round_probs, send_message, serve)


@pytest.fixture(scope="module")
def model():
    return desk_model("cnn-small", 1)


@pytest.fixture(scope="module")
def images():
    return desk_split()[1].images[:8]


@pytest.fixture
def full_service(model):
    with serve(model, model_tag="owner") as handle:
        yield handle


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_mode_parsing():
    assert parse_mode("full") is None
    assert parse_mode("rounded(3)") == 3 and parse_mode("rounded:2") == 2
    for bad in ("rounded(0)", "rounded()", "coarse"):
        with pytest.raises(ValueError):
            parse_mode(bad)


def test_truncation_then_renormalisation():
    p = np.array([0.1239, 0.3761, 0.5])
    np.testing.assert_allclose(round_probs(p, 2), [0.12, 0.37, 0.5])
    q = publish_probs(p, 2)
    assert abs(q.sum() - 1) < 1e-15
    np.testing.assert_allclose(q, np.array([0.12, 0.37, 0.5]) / 0.99)
    with pytest.raises(ValueError):
        publish_probs(np.full(20, 0.05), 1)


def test_endpoint_parsing():
    assert parse_endpoint("localhost:99") == ("localhost", 99)
    assert parse_endpoint(":7") == ("127.0.0.1", 7)
    with pytest.raises(ValueError):
        parse_endpoint("nohost")


def test_full_mode_is_bit_exact(full_service, model, images):
    with RemoteOracle(full_service.endpoint) as client:
        for x in images:
            assert client.classify(x).tobytes() == model.forward(x).tobytes()
        assert client.last_tag == "owner"


def test_tag_is_omitted_by_default(model, images):
    with serve(model) as handle, RemoteOracle(handle.endpoint) as client:
        client.classify(images[0])
        assert client.last_tag is None


def test_rounded_mode(model, images):
    with serve(model, mode="rounded(3)") as handle, RemoteOracle(handle.endpoint) as client:
        for x in images:
            got = client.classify(x)
            exact = model.forward(x)
            assert abs(got.sum() - 1) < 1e-12
            assert np.abs(got - exact).max() <= 0.011


def test_malformed_request_then_next_is_served(full_service, images):
    with socket.create_connection(full_service.address, timeout=5) as sock:
        send_message(sock, {"shape": [1, 16, 16], "pixels": [0.5] * 10})
        assert recv_message(sock)["error"].startswith("bad_pixels")
        send_message(sock, {"pixels": []})
        assert recv_message(sock)["error"].startswith("bad_request")
        send_message(sock, {"shape": [1, 8, 8], "pixels": [0.5] * 64})
        assert recv_message(sock)["error"].startswith("bad_shape")
        send_message(sock, {"shape": [1, 16, 16], "pixels": images[0].ravel().tolist()})
        assert len(recv_message(sock)["probs"]) == 10


def test_garbage_frame_gets_error_and_service_survives(full_service, images):
    with socket.create_connection(full_service.address, timeout=5) as sock:
        body = b"{not json"
        sock.sendall(HEADER.pack(len(body)) + body)
        assert "error" in recv_message(sock)
    with RemoteOracle(full_service.endpoint) as client:
        assert client.classify(images[0]).shape == (10,)


def test_error_reply_raises(full_service):
    with RemoteOracle(full_service.endpoint) as client:
        with pytest.raises(OracleError):
            client.classify(np.full((1, 4, 4), 0.5))


def test_dead_endpoint_is_unreachable(images):
    client = RemoteOracle(f"127.0.0.1:{free_port()}", timeout=0.5, retries=2, backoff=0.01)
    with pytest.raises(OracleUnreachable):
        client.classify(images[0])


def test_endpoint_from_environment(monkeypatch):
    monkeypatch.setenv("OWNVERIFY_ENDPOINT", "10.1.2.3:4567")
    assert RemoteOracle().address == ("10.1.2.3", 4567)


def test_concurrent_clients_match_serial(full_service, model, images):
    serial = [model.forward(x) for x in images]
    results = {}

    def worker(i):
        with RemoteOracle(full_service.endpoint) as client:
            results[i] = [client.classify(x) for x in images]

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for got in results.values():
        assert all(a.tobytes() == b.tobytes() for a, b in zip(got, serial))
    assert len(results) == 6


def test_rounded_two_digits_still_verifies(model, images):
    with serve(model, mode="rounded(2)") as handle, RemoteOracle(handle.endpoint) as client:
        checked = 0
        for i, x in enumerate(images[:4]):
            req = VerificationRequest(x, (model.predict(x) + 1) % 10, 0.1 + 0.1 * (i % 3))
            verdict, _, trace = owner_verify(model, client, req)
            if trace.converged:
                checked += 1
                assert verdict.d_prob <= 0.1
        assert checked >= 2
