import numpy as np
import pytest

from taskvec.backend.base import GenerationParams, InterventionError, InterventionSpec

PROMPTS = [
    "big -> small\nhot ->",
    "a -> A\nb ->",
    "up -> down\nfast -> slow\nbig ->",
    "the cat ->",
    "c -> C\na -> A\nb ->",
    "hot -> cold\nup ->",
    "sat -> mat\nthe ->",
    "on ->",
    "fast -> slow\nhot -> cold\ncat ->",
    "mat -> sat\nb -> B\nc ->",
]
PARAMS = GenerationParams(max_tokens=6, stop_tokens=())


@pytest.mark.parametrize("prompt", PROMPTS)
def test_identity_injection(tiny_hf, prompt):
    toks = tiny_hf.tokenize(prompt)
    cap = tiny_hf.forward_capture(toks)
    plain = tiny_hf.generate(toks, params=PARAMS)
    for layer in range(tiny_hf.num_layers):
        for pos in (0, len(toks) - 1):
            iv = [InterventionSpec(layer, pos, cap[layer, pos])]
            assert tiny_hf.generate(toks, iv, PARAMS).tokens.ids == plain.tokens.ids
            assert np.array_equal(tiny_hf.forward_capture(toks, iv).array, cap.array)


def test_locality(tiny_hf):
    toks = tiny_hf.tokenize(PROMPTS[2])
    base = tiny_hf.forward_capture(toks).array
    rng = np.random.default_rng(0)
    for layer in range(tiny_hf.num_layers):
        for pos in range(len(toks)):
            vec = rng.normal(size=tiny_hf.hidden_width)
            hit = tiny_hf.forward_capture(toks, [InterventionSpec(layer, pos, vec)]).array
            assert np.array_equal(hit[:layer, :], base[:layer, :])
            assert np.array_equal(hit[layer, :pos], base[layer, :pos])
            assert np.array_equal(hit[:, :pos], base[:, :pos])
            assert np.allclose(hit[layer, pos], vec.astype(np.float32))


def test_injection_changes_generation(tiny_hf):
    toks = tiny_hf.tokenize("a -> A\nb ->")
    plain = tiny_hf.generate(toks, params=PARAMS)
    vec = np.full(tiny_hf.hidden_width, 50.0)
    hit = tiny_hf.generate(toks, [InterventionSpec(tiny_hf.num_layers - 1, len(toks) - 1, vec)], PARAMS)
    assert hit.step_distributions[0].tolist() != plain.step_distributions[0].tolist()


def test_cached_generation_matches_full_forward(tiny_hf):
    toks = tiny_hf.tokenize(PROMPTS[0])
    out = tiny_hf.generate(toks, params=GenerationParams(max_tokens=3, stop_tokens=()))
    for step in range(3):
        prefix = toks + out.tokens[:step]
        one = tiny_hf.generate(prefix, params=GenerationParams(max_tokens=1, stop_tokens=()))
        assert one.tokens.ids[0] == out.tokens.ids[step]
        assert np.allclose(one.step_distributions[0], out.step_distributions[step], atol=1e-5)


def test_tokenize_tiles_text(tiny_hf):
    for p in PROMPTS:
        toks = tiny_hf.tokenize(p)
        assert toks.text == p
        assert tiny_hf.detokenize(toks) == p


def test_bad_layer(tiny_hf):
    toks = tiny_hf.tokenize("a ->")
    with pytest.raises(InterventionError):
        tiny_hf.forward_capture(toks, [InterventionSpec(tiny_hf.num_layers, 0, np.zeros(tiny_hf.hidden_width))])
