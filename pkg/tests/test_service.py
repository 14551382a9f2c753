import numpy as np
import pytest
from fastapi.testclient import TestClient

from causal_voxel.cohort import default_ad_graph, ground_truth_mechanisms
from causal_voxel.phantom import GridSpec, PhantomGenerator
from causal_voxel.scm import sample_prior
from causal_voxel.service import build_app, volume_to_bytes


@pytest.fixture(scope="module")
def service(generator, volume_regression):
    """Service on the default grid with the shared regression fixture."""
    graph = default_ad_graph()
    mechs = ground_truth_mechanisms()
    app = build_app(graph, mechs, generator, volume_regression, seed=0)
    client = TestClient(app)
    return client, generator


@pytest.fixture(scope="module")
def ci_like_upload(service):
    """Upload a low-score phantom; returns (image_id, demographics row)."""
    client, generator = service
    graph = default_ad_graph()
    mechs = ground_truth_mechanisms()
    rows = sample_prior(graph, mechs, seed=42, n=40).rows
    row = min(rows, key=lambda r: r["m"])
    w = generator.decoder.style_for_volumes(row["b"], row["g"], row["v"])
    image = generator.generate(w, 4242)
    response = client.post("/v1/images", content=volume_to_bytes(image))
    assert response.status_code == 200
    return response.json()["image_id"], row


class TestHealthAndInfo:
    def test_health(self, service):
        client, _ = service
        body = client.get("/v1/health").json()
        assert body["status"] == "ok" and body["model_loaded"]

    def test_model_info(self, service):
        client, _ = service
        body = client.get("/v1/model/info").json()
        assert body["grid"]["dims"] == [64, 64, 64]
        assert set(body["volumes"]) == {"brain", "gm", "ventricle"}
        names = [v["name"] for v in body["graph"]["variables"]]
        assert names == ["a", "s", "m", "b", "v", "g"]

    def test_model_not_loaded_503(self):
        client = TestClient(build_app())
        response = client.get("/v1/model/info")
        assert response.status_code == 503
        assert response.json()["code"] == "model_not_loaded"


class TestUpload:
    def test_upload_dedupes(self, service):
        client, generator = service
        blob = volume_to_bytes(generator.generate(np.zeros(8), 7))
        a = client.post("/v1/images", content=blob).json()
        b = client.post("/v1/images", content=blob).json()
        assert a["image_id"] == b["image_id"]
        assert a["volumes"]["brain"] > 1000

    def test_bad_payload_400(self, service):
        client, _ = service
        response = client.post("/v1/images", content=b"not a nifti file at all")
        assert response.status_code == 400
        assert response.json()["code"] == "bad_volume"

    def test_wrong_grid_400(self, service):
        client, _ = service
        other = PhantomGenerator(GridSpec((16, 16, 16), 12.0))
        response = client.post("/v1/images",
                               content=volume_to_bytes(other.generate(np.zeros(8), None)))
        assert response.status_code == 400
        assert response.json()["code"] == "grid_mismatch"


class TestSlices:
    def test_center_axial_slice_png(self, service, ci_like_upload):
        client, _ = service
        image_id, _ = ci_like_upload
        response = client.get(f"/v1/images/{image_id}/slice?axis=axial")
        assert response.status_code == 200
        assert response.headers["content-type"] == "image/png"
        from PIL import Image
        import io

        img = Image.open(io.BytesIO(response.content))
        assert img.size == (64, 64)

    def test_byte_identical_repeats(self, service, ci_like_upload):
        client, _ = service
        image_id, _ = ci_like_upload
        url = f"/v1/images/{image_id}/slice?axis=coronal&index=10&window=0,0.9"
        assert client.get(url).content == client.get(url).content

    def test_unknown_image_404(self, service):
        client, _ = service
        response = client.get("/v1/images/deadbeef/slice")
        assert response.status_code == 404

    def test_index_out_of_range_422_with_range(self, service, ci_like_upload):
        client, _ = service
        image_id, _ = ci_like_upload
        response = client.get(f"/v1/images/{image_id}/slice?axis=axial&index=99")
        assert response.status_code == 422
        assert response.json()["details"]["valid"] == [0, 63]

    def test_bad_axis_422(self, service, ci_like_upload):
        client, _ = service
        image_id, _ = ci_like_upload
        assert client.get(f"/v1/images/{image_id}/slice?axis=oblique").status_code == 422


class TestCounterfactual:
    def test_null_intervention_identity(self, service, ci_like_upload):
        client, _ = service
        image_id, _ = ci_like_upload
        body = client.post("/v1/counterfactual",
                           json={"image_id": image_id, "interventions": {}}).json()
        assert body["ssim"] >= 0.98
        for delta in body["volume_deltas_percent"].values():
            assert abs(delta) < 1.0

    def test_mmse_30_directions(self, service, ci_like_upload):
        client, _ = service
        image_id, row = ci_like_upload
        body = client.post("/v1/counterfactual", json={
            "image_id": image_id,
            "interventions": {"mmse": 30},
        }).json()
        assert body["volume_deltas_ml"]["ventricle"] < 0
        assert body["volume_deltas_ml"]["gm"] > 0
        assert body["result_image_id"] != image_id

    def test_identical_requests_cached(self, service, ci_like_upload):
        client, _ = service
        image_id, _ = ci_like_upload
        payload = {"image_id": image_id, "interventions": {"m": 28.0}}
        before = client.get("/v1/model/info").json()["cache"]["responses"]["hits"]
        first = client.post("/v1/counterfactual", json=payload)
        second = client.post("/v1/counterfactual", json=payload)
        assert first.content == second.content
        after = client.get("/v1/model/info").json()["cache"]["responses"]["hits"]
        assert after > before

    def test_invalid_intervention_names_bounds(self, service, ci_like_upload):
        client, _ = service
        image_id, _ = ci_like_upload
        response = client.post("/v1/counterfactual", json={
            "image_id": image_id,
            "interventions": {"mmse": 99},
        })
        assert response.status_code == 400
        body = response.json()
        assert body["code"] == "invalid_intervention"
        assert body["details"]["m"]["bounds"] == [0.0, 30.0]

    def test_unknown_image_404(self, service):
        client, _ = service
        response = client.post("/v1/counterfactual",
                               json={"image_id": "feedface", "interventions": {}})
        assert response.status_code == 404

    def test_slice_differs_after_brain_edit(self, service, ci_like_upload):
        client, _ = service
        image_id, _ = ci_like_upload
        factual = client.post("/v1/counterfactual",
                              json={"image_id": image_id, "interventions": {}}).json()
        base_brain = factual["factual_volumes"]["brain"]
        edited = client.post("/v1/counterfactual", json={
            "image_id": image_id,
            "interventions": {"brain": base_brain * 0.85},
        }).json()
        url = "/v1/images/{}/slice?axis=axial"
        a = client.get(url.format(image_id)).content
        b = client.get(url.format(edited["result_image_id"])).content
        assert a != b
