import json
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from app.config import CANONICAL_DOMAINS, WorldConfig
from app.engine.aligner import feature_loss_from_features
from app.engine.datasets import sample_caption_pairs
from app.engine.synthworld import SynthWorld
from app.engine.vlm import (
    DualEncoder,
    PerceptualNet,
    TokenSeq,
    Vocabulary,
    contrastive_loss,
    encode_captions,
    encode_text,
    load_dual_encoder,
    perceptual_features,
    pretrain,
    save_dual_encoder,
    split_words,
    tokenize,
)
from app.middleware.error_handler import (
    ArtifactMismatchError,
    FrozenParameterError,
    ParameterError,
    TokenizationError,
)


def test_vocabulary_ids(vocab):
    assert vocab.words[0] == Vocabulary.PAD
    ids = vocab.ids("Driving the car on")
    assert len(ids) == 4 and 0 not in ids
    with pytest.raises(TokenizationError):
        vocab.ids("driving a spaceship")


def test_vocabulary_hash_follows_words(prompt_config):
    other = Vocabulary.for_prompts(prompt_config.model_copy(update={"prefix_text": "Racing the car on"}))
    assert other.hash != Vocabulary.for_prompts(prompt_config).hash


def test_tokenize_marks_fixed_tokens(vocab, encoder):
    seq = tokenize("the day.", vocab, encoder)
    assert len(seq) == 2
    assert seq.d_tok == 16
    assert seq.source_mask == ["fixed_vocab", "fixed_vocab"]


def test_text_embeddings_are_unit_norm(vocab, encoder):
    emb = encode_captions(["driving on the road, clear noon", "goal near"], vocab, encoder)
    assert emb.shape == (2, 16)
    torch.testing.assert_close(emb.norm(dim=-1), torch.ones(2))


def test_token_sequence_limits(encoder):
    with pytest.raises(ParameterError):
        encoder.encode_tokens(torch.zeros(1, 0, 16))
    with pytest.raises(ParameterError):
        encoder.encode_tokens(torch.zeros(1, encoder.max_length + 1, 16))
    with pytest.raises(ParameterError):
        encoder.encode_images(torch.zeros(1, 1, 16, 16))


@pytest.mark.parametrize("batch", [2, 8, 32])
def test_contrastive_loss_is_log_batch_when_logits_are_flat(batch):
    torch.manual_seed(0)
    img = F.normalize(torch.randn(batch, 16), dim=-1)
    txt = F.normalize(torch.randn(batch, 16), dim=-1)
    flat = contrastive_loss(img, txt, torch.tensor(0.0))
    assert flat.item() == pytest.approx(math.log(batch), abs=1e-5)
    shared = contrastive_loss(img, txt, torch.tensor(0.0), ["a"] * batch)
    assert shared.item() == pytest.approx(math.log(batch), abs=1e-5)


def test_contrastive_loss_rewards_matched_pairs():
    emb = torch.eye(4)
    matched = contrastive_loss(emb, emb, torch.tensor(10.0))
    shuffled = contrastive_loss(emb, emb.roll(1, dims=0), torch.tensor(10.0))
    assert matched < shuffled


def test_frozen_encoder_rejects_mutation(encoder):
    assert encoder.frozen
    assert not any(p.requires_grad for p in encoder.parameters())
    encoder.train(False)
    with pytest.raises(FrozenParameterError):
        encoder.train(True)
    with pytest.raises(FrozenParameterError):
        encoder.load_state_dict(encoder.state_dict())


def test_perceptual_net(encoder):
    net = PerceptualNet.from_encoder(encoder, [0, 1])
    feats = net(torch.rand(2, 3, 16, 16))
    assert [tuple(f.shape) for f in feats] == [(2, 8, 8, 8), (2, 8, 4, 4)]
    assert net.frozen
    with pytest.raises(ParameterError):
        PerceptualNet.from_encoder(encoder, [7])


def test_save_and_load_dual_encoder(encoder, vocab, tmp_path):
    weights, sidecar = save_dual_encoder(encoder, vocab, tmp_path / "vlm.pt", seed=0)
    loaded, loaded_vocab = load_dual_encoder(weights)
    assert loaded.frozen
    assert loaded_vocab.words == vocab.words
    images = torch.rand(2, 3, 16, 16)
    torch.testing.assert_close(loaded.encode_images(images), encoder.encode_images(images))

    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    meta["architecture_hash"] = "0" * 64
    sidecar.write_text(json.dumps(meta), encoding="utf-8")
    with pytest.raises(ArtifactMismatchError):
        load_dual_encoder(weights)


def test_pretrain_needs_enough_pairs(world, vlm_config, vocab):
    pairs = sample_caption_pairs(world, per_domain=1, seed=0)
    with pytest.raises(ParameterError):
        pretrain(pairs, vlm_config.model_copy(update={"min_pairs": 100}), vocab, seed=0)


def test_pretrain_returns_frozen_encoder(world, vlm_config, vocab):
    pairs = sample_caption_pairs(world, per_domain=4, seed=0)
    model, history = pretrain(pairs, vlm_config, vocab, seed=0)
    assert isinstance(model, DualEncoder)
    assert model.frozen
    assert len(history["loss"]) == vlm_config.epochs
    assert math.isfinite(history["loss"][0])


@pytest.mark.parametrize("text, word", [
    ("driving 42 cars", "42"),
    ("clear-noon", "clear-noon"),
    ("Driving the car on the MOON!", "moon"),
])
def test_unknown_tokens_are_named(vocab, text, word):
    with pytest.raises(TokenizationError) as excinfo:
        vocab.ids(text)
    assert excinfo.value.word == word


def test_split_words_strips_only_sentence_punctuation():
    assert split_words("Driving on the road, clear noon.") == ["driving", "on", "the", "road", "clear", "noon"]
    assert split_words("wet-cloudy  (sunset)") == ["wet-cloudy", "sunset"]


def test_token_order_changes_the_embedding(encoder):
    generator = torch.Generator().manual_seed(0)
    differing = 0
    with torch.no_grad():
        for _ in range(100):
            tokens = torch.randn(6, encoder.d_tok, generator=generator)
            swapped = tokens[[3, 1, 2, 0, 4, 5]]
            a = encode_text(TokenSeq.learned(tokens), encoder)
            b = encode_text(TokenSeq.learned(swapped), encoder)
            differing += bool((a - b).abs().max() > 1e-5)
    assert differing >= 99


def test_perceptual_features_favour_geometry_over_weather(encoder):
    world = SynthWorld(WorldConfig(resolution=32))
    net = PerceptualNet.from_encoder(encoder, [0, 1])
    clear, rainy = CANONICAL_DOMAINS[0], CANONICAL_DOMAINS[1]
    rng = np.random.default_rng(0)
    weather_gap, state_gap = [], []
    with torch.no_grad():
        for i in range(50):
            a, b = world.random_state(rng), world.random_state(rng)
            base = perceptual_features(world.render(a, clear, i), net)
            weather_gap.append(feature_loss_from_features(base, perceptual_features(world.render(a, rainy, i), net)).item())
            state_gap.append(feature_loss_from_features(base, perceptual_features(world.render(b, clear, i), net)).item())
    assert np.mean(weather_gap) < np.mean(state_gap)
