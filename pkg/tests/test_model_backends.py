"""Real backend code paths driven by tiny randomly initialised models."""

import numpy as np
import pytest

torch = pytest.importorskip("torch")
diffusers = pytest.importorskip("diffusers")
transformers = pytest.importorskip("transformers")

from diffsim.backends import encode_image, extract_ip_tokens, extract_projected_latents, list_sites  # noqa: E402
from diffsim.backends.base import STANDARD_RESOLUTIONS  # noqa: E402
from diffsim.pipeline import compute_pair_score  # noqa: E402
from diffsim.sites import MetricConfig, default_metric_kind  # noqa: E402

from conftest import random_image  # noqa: E402

pytestmark = pytest.mark.models

CROSS_DIM = 12


def tiny_unet_backend():
    from diffusers import AutoencoderKL, UNet2DConditionModel
    from diffusers.models.attention_processor import IPAdapterAttnProcessor2_0

    from diffsim.backends.unet import UNetBackend

    torch.manual_seed(0)
    unet = UNet2DConditionModel(
        sample_size=8, in_channels=4, out_channels=4, layers_per_block=1,
        block_out_channels=(8, 16, 16, 16),
        down_block_types=("CrossAttnDownBlock2D",) * 3 + ("DownBlock2D",),
        up_block_types=("UpBlock2D",) + ("CrossAttnUpBlock2D",) * 3,
        cross_attention_dim=CROSS_DIM, attention_head_dim=2, norm_num_groups=4,
    )
    vae = AutoencoderKL(
        in_channels=3, out_channels=3, down_block_types=("DownEncoderBlock2D",) * 2,
        up_block_types=("UpDecoderBlock2D",) * 2, block_out_channels=(8, 16), latent_channels=4,
        norm_num_groups=4, layers_per_block=1, mid_block_add_attention=False,
    )
    ip_processors = {}
    for name in unet.attn_processors:
        if ".attn2." in name:
            mod = unet.get_submodule(name[: -len(".processor")])
            ip_processors[name] = IPAdapterAttnProcessor2_0(mod.to_q.out_features, CROSS_DIM, num_tokens=(16,), scale=1.0)
    w = torch.randn(3, 16 * CROSS_DIM)

    def projector(px):
        return torch.tanh(torch.from_numpy(px.reshape(-1, 3).mean(0)) @ w).reshape(1, 16, CROSS_DIM)

    schedule = np.cumprod(1 - np.linspace(1e-4, 0.02, 1000))
    return UNetBackend("sd15", unet, vae, torch.randn(1, 5, CROSS_DIM), schedule, ip_processors=ip_processors,
                       ip_projector=projector, resolutions=(32,) + STANDARD_RESOLUTIONS, default_resolution=32)


def tiny_vit_backend(backend_id):
    from diffsim.backends.vit import CLIP_MEAN, CLIP_STD, IMAGENET_MEAN, IMAGENET_STD, ViTBackend

    torch.manual_seed(1)
    if backend_id == "clip-vit":
        cfg = transformers.CLIPVisionConfig(hidden_size=16, intermediate_size=32, num_hidden_layers=2,
                                            num_attention_heads=2, image_size=32, patch_size=8)
        model, mean, std = transformers.CLIPVisionModel(cfg), CLIP_MEAN, CLIP_STD
    else:
        cfg = transformers.Dinov2Config(hidden_size=16, intermediate_size=32, num_hidden_layers=2,
                                        num_attention_heads=2, image_size=28, patch_size=14)
        model, mean, std = transformers.Dinov2Model(cfg), IMAGENET_MEAN, IMAGENET_STD
    return ViTBackend(backend_id, model, mean, std, cfg.image_size, cfg.num_attention_heads)


@pytest.fixture(scope="module")
def unet_backend():
    return tiny_unet_backend()


@pytest.fixture
def sd15(swap_backend, unet_backend):
    swap_backend("sd15", lambda: unet_backend)
    return unet_backend


def test_unet_sites_cover_blocks(sd15):
    sites = list_sites("sd15")
    selfs = {s.block for s in sites if s.kind == "self"}
    assert {"down_2", "up_0"} <= selfs
    assert selfs == {"down_0", "down_1", "down_2", "mid", "up_0", "up_1", "up_2"}
    assert any(s.kind == "cross" for s in sites)
    assert all(s.timestep == 600 for s in sites)


def test_unet_every_site_extracts_and_self_identity(sd15):
    a, b = random_image(0, 40, 40), random_image(1, 40, 40)
    for s in list_sites("sd15"):
        c = MetricConfig(s, default_metric_kind("sd15", s.kind))
        p = extract_projected_latents("sd15", a, s)
        assert p.tokens_q >= 1
        if s.kind == "cross":
            assert p.tokens_kv == 16
        assert compute_pair_score(c, a, a).value == pytest.approx(1.0, abs=1e-5)
        assert compute_pair_score(c, a, b).value == compute_pair_score(c, b, a).value


def test_unet_ip_tokens_sixteen(sd15):
    t1 = extract_ip_tokens("sd15", random_image(2), 32)
    t2 = extract_ip_tokens("sd15", random_image(2), 32)
    assert t1.n_tokens == 16
    assert np.array_equal(t1.tokens, t2.tokens)


def test_unet_extraction_deterministic(sd15):
    s = [x for x in list_sites("sd15") if x.block == "up_0" and x.kind == "self"][0].with_(timestep=900)
    img = random_image(3)
    assert extract_projected_latents("sd15", img, s, 4).identical_to(extract_projected_latents("sd15", img, s, 4))


def test_unet_processors_restored(sd15):
    before = {k: type(v) for k, v in sd15.unet.attn_processors.items()}
    cross = [x for x in list_sites("sd15") if x.kind == "cross"][0]
    extract_projected_latents("sd15", random_image(4), cross)
    assert {k: type(v) for k, v in sd15.unet.attn_processors.items()} == before


def test_unet_resolution_sweep_accepted(sd15):
    img = random_image(5, 48, 64)
    for r in STANDARD_RESOLUTIONS:
        lat = encode_image("sd15", img, r)
        assert lat.shape[-1] == r // 2  # tiny VAE downsamples by 2


def test_unet_rejects_out_of_schedule_timestep(sd15):
    from diffsim.errors import ConfigError

    s = list_sites("sd15")[0].with_(timestep=1000)
    with pytest.raises(ConfigError):
        extract_projected_latents("sd15", random_image(6), s)


@pytest.mark.parametrize("backend_id", ["clip-vit", "dinov2"])
def test_vit_self_attention_path(swap_backend, backend_id):
    b = tiny_vit_backend(backend_id)
    swap_backend(backend_id, lambda: b)
    sites = list_sites(backend_id)
    assert [s.block for s in sites] == [0, 1]
    assert all(s.timestep is None for s in sites)
    a, c = random_image(7, 50, 40), random_image(8)
    for s in sites:
        cfg = MetricConfig(s, default_metric_kind(backend_id))
        p1 = extract_projected_latents(backend_id, a, s, noise_seed=1)
        p2 = extract_projected_latents(backend_id, a, s, noise_seed=99)
        assert p1.identical_to(p2)  # no noising
        assert p1.heads == 2 and p1.d_head == 8
        assert compute_pair_score(cfg, a, a).value == pytest.approx(1.0, abs=1e-5)
        assert compute_pair_score(cfg, a, c).value == compute_pair_score(cfg, c, a).value


def test_vit_projections_match_layer(swap_backend):
    """Captured Q equals the layer's q_proj applied to its input hidden state."""
    b = tiny_vit_backend("clip-vit")
    swap_backend("clip-vit", lambda: b)
    s = list_sites("clip-vit")[1]
    img = random_image(9)
    p = extract_projected_latents("clip-vit", img, s)
    from diffsim.images import load_image, preprocess

    x = torch.from_numpy(b.encode(preprocess(load_image(img), 32)))[None]
    with torch.no_grad():
        hs = b.model(pixel_values=x, output_hidden_states=True).hidden_states
        layer = b.model.vision_model.encoder.layers[1] if hasattr(b.model, "vision_model") else None
        if layer is None:
            layer = dict(b.model.named_modules())["encoder.layers.1"]
        q = layer.self_attn.q_proj(layer.layer_norm1(hs[1]))[0].numpy()
    np.testing.assert_allclose(p.q.transpose(1, 0, 2).reshape(q.shape), q, atol=1e-5)
