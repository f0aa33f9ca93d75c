import numpy as np
import pytest

from aqcompress.aq_model import (
    AqHyper,
    EncoderParams,
    NumericError,
    OptimConfig,
    TrainingError,
    decode_soft,
    encode_soft,
    encoder_scores,
    extract_codes,
    init_model,
    loss_and_grads,
    one_hot,
    recon_loss,
    reconstruct_hard,
    train_aq,
)
from conftest import central_diff, rel_err


def _micro(rng, P=6, D=5, M=3, K=4, H=3):
    hyper = AqHyper(D, M, K, H, seed=int(rng.integers(1000)))
    enc, books = init_model(hyper, (0.0, 1.0))
    enc = enc.astype(np.float64)
    enc.b1 += rng.normal(0, 0.3, enc.b1.shape)
    enc.b2 += rng.normal(0, 0.3, enc.b2.shape)
    books = books.astype(np.float64)
    pages = rng.standard_normal((P, D))
    noise = rng.gumbel(size=(P, M, K))
    return hyper, enc, books, pages, noise


# -- init ----------------------------------------------------------------------


def test_init_deterministic():
    h = AqHyper(4, 2, 3, 5, seed=7)
    a, b = init_model(h, (0, 1)), init_model(h, (0, 1))
    for x, y in zip(a[0].as_tuple(), b[0].as_tuple()):
        assert np.array_equal(x, y)
    assert np.array_equal(a[1], b[1])


def test_init_shapes_and_bounds():
    h = AqHyper(D=6, M=2, K=5, H=4)
    enc, books = init_model(h, (0, 1))
    assert enc.theta1.shape == (2, 6, 4) and enc.theta2.shape == (2, 4, 5)
    assert books.shape == (2, 5, 6)
    assert np.abs(enc.theta1).max() <= np.sqrt(6 / 10)
    assert np.abs(enc.theta2).max() <= np.sqrt(6 / 9)
    assert not enc.b1.any() and not enc.b2.any()


def test_init_zero_std_fallback():
    _, books = init_model(AqHyper(100, 1, 100, 2), (0, 0.0))
    assert abs(books.std() - 0.01) < 0.0005


def test_init_codebook_std_monte_carlo():
    # 4 * 250 * 100 = 1e5 samples; target std = 1 / sqrt(4)
    _, books = init_model(AqHyper(D=100, M=4, K=250, H=1, seed=3), (0.0, 1.0))
    assert books.size == 100_000
    assert abs(books.std() - 0.5) < 0.025


def test_hyper_validation():
    with pytest.raises(ValueError):
        AqHyper(0, 1, 1)
    with pytest.raises(ValueError):
        AqHyper(1, 1, 1, tau=0)


# -- forward pieces --------------------------------------------------------------


def test_encode_soft_rows_sum_to_one(rng):
    hyper, enc, _, pages, _ = _micro(rng)
    d = encode_soft(pages, enc, hyper, rng, noise_on=True)
    assert d.shape == (6, 3, 4)
    np.testing.assert_allclose(d.sum(-1), 1.0, atol=1e-6)
    d32 = encode_soft(pages.astype(np.float32), enc.astype(np.float32), hyper, rng)
    np.testing.assert_allclose(d32.sum(-1), 1.0, atol=1e-6)


def test_encode_soft_noise_off_argmax_matches_alpha(rng):
    hyper, enc, _, pages, _ = _micro(rng, P=50)
    d = encode_soft(pages, enc, hyper, noise_on=False)
    alpha, _ = encoder_scores(pages, enc)
    assert np.array_equal(d.argmax(-1), alpha.argmax(-1))


def test_encode_soft_single_symbol(rng):
    hyper = AqHyper(3, 2, 1, 2)
    enc, _ = init_model(hyper, (0, 1))
    d = encode_soft(rng.standard_normal((5, 3)).astype(np.float32), enc, hyper, rng)
    assert np.all(d == 1.0)


def test_encode_soft_reports_bad_page(rng):
    hyper, enc, _, pages, _ = _micro(rng)
    enc.theta1[:] = 0
    enc.b1[:] = 0
    enc.b2[0, 0] = np.nan
    with pytest.raises(NumericError, match="page 0"):
        encode_soft(pages, enc, hyper, noise_on=False)


def test_decode_soft_one_hot_sum():
    books = np.arange(2 * 3 * 2, dtype=np.float64).reshape(2, 3, 2)
    d = one_hot(np.array([[2, 1]]), 3, np.float64)
    assert decode_soft(d, books).tolist() == [[4 + 8, 5 + 9]]


def test_decode_soft_single_basis():
    books = np.array([[[1.5, -2.0]]])
    d = np.ones((4, 1, 1))
    assert np.all(decode_soft(d, books) == [1.5, -2.0])


def test_decode_soft_brute_force(rng):
    B, M, K, D = 7, 3, 4, 5
    d = rng.dirichlet(np.ones(K), size=(B, M))
    books = rng.standard_normal((M, K, D))
    expected = np.zeros((B, D))
    for b in range(B):
        for m in range(M):
            for k in range(K):
                expected[b] += d[b, m, k] * books[m, k]
    np.testing.assert_allclose(decode_soft(d, books), expected, rtol=1e-12, atol=1e-12)


def test_recon_loss_values(rng):
    assert recon_loss(np.ones((3, 2)), np.ones((3, 2))) == 0.0
    assert recon_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])) == 1.0
    a, b = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))
    brute = sum(sum((a[p, j] - b[p, j]) ** 2 for j in range(4)) for p in range(9)) / 9
    assert recon_loss(a, b) == pytest.approx(brute, rel=1e-12)
    b2 = a.copy()
    b2[3, 1] = np.nextafter(b2[3, 1], np.inf)
    assert recon_loss(a, b2) > 0


# -- gradients -----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    P, D, M, K, H = (int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 4)),
                     int(rng.integers(1, 6)), int(rng.integers(1, 5)))
    hyper, enc, books, pages, noise = _micro(rng, P, D, M, K, H)
    _, g_enc, g_books = loss_and_grads(pages, enc, books, noise, hyper.tau)

    def f():
        d = encode_soft(pages, enc, hyper, noise=noise)
        return recon_loss(pages, decode_soft(d, books))

    for param, grad in zip([*enc.as_tuple(), books], [*g_enc.as_tuple(), g_books]):
        assert rel_err(grad, central_diff(f, param)) < 1e-4


def test_gradients_without_noise_and_tau(rng):
    hyper, enc, books, pages, _ = _micro(rng)
    tau = 0.7
    _, g_enc, g_books = loss_and_grads(pages, enc, books, None, tau)

    def f():
        d = encode_soft(pages, enc, AqHyper(hyper.D, hyper.M, hyper.K, hyper.H, tau=tau), noise_on=False)
        return recon_loss(pages, decode_soft(d, books))

    for param, grad in zip([*enc.as_tuple(), books], [*g_enc.as_tuple(), g_books]):
        assert rel_err(grad, central_diff(f, param)) < 1e-4


# -- codes ---------------------------------------------------------------------


def _fixed_alpha_encoder(b2):
    K = len(b2)
    return EncoderParams(np.zeros((1, 2, 1)), np.zeros((1, 1)), np.zeros((1, 1, K)), np.array([b2], float))


def test_extract_unique_max():
    enc = _fixed_alpha_encoder([0.0, 1.0, 2.0, 5.0, 1.0])
    assert extract_codes(np.zeros((2, 2)), enc).tolist() == [[3], [3]]


def test_extract_tie_goes_low():
    enc = _fixed_alpha_encoder([0.0, 5.0, 0.0, 0.0, 5.0])
    assert extract_codes(np.zeros((1, 2)), enc).tolist() == [[1]]


def test_extract_matches_brute_force_argmax(rng):
    hyper, enc, _, pages, _ = _micro(rng, P=40, K=5)
    codes = extract_codes(pages, enc)
    alpha, _ = encoder_scores(pages, enc)
    for p in range(40):
        for m in range(hyper.M):
            row = list(alpha[p, m])
            assert codes[p, m] == row.index(max(row))


def test_extract_invariant_to_monotone_transform(rng):
    hyper, enc, _, pages, _ = _micro(rng, P=30)
    alpha, _ = encoder_scores(pages, enc)
    for f in (np.log, np.sqrt, lambda a: 3 * a**3 + 1):
        assert np.array_equal(np.argmax(f(alpha), -1), extract_codes(pages, enc))


def test_reconstruct_hard_hand_sums():
    books = np.array([[[1, 0], [0, 1]], [[10, 10], [20, 30]]], np.float32)
    codes = np.array([[0, 1], [1, 0]])
    assert reconstruct_hard(codes, books).tolist() == [[21, 30], [10, 11]]
    zero = reconstruct_hard(np.zeros((3, 2), int), books)
    assert np.all(zero == books[0, 0] + books[1, 0])
    with pytest.raises(ValueError):
        reconstruct_hard(np.array([[0, 2]]), books)


def test_reconstruct_hard_equals_one_hot_decode(rng):
    M, K, D = 5, 7, 6
    books = rng.standard_normal((M, K, D)).astype(np.float32)
    codes = rng.integers(0, K, (100, M))
    hard = reconstruct_hard(codes, books)
    soft = decode_soft(one_hot(codes, K), books)
    assert hard.tobytes() == soft.tobytes()


# -- training ------------------------------------------------------------------


def test_train_zero_matrix_reaches_zero():
    W = np.zeros((64, 4), np.float32)
    _, _, log = train_aq(W, AqHyper(4, 2, 3, 4), OptimConfig(epochs=150))
    assert log.losses[-1] <= 1e-6


def test_train_deterministic(rng):
    W = rng.standard_normal((300, 4)).astype(np.float32)
    h = AqHyper(4, 2, 4, 8, seed=5)
    a = train_aq(W, h, OptimConfig(epochs=2, batch_size=64))
    b = train_aq(W, h, OptimConfig(epochs=2, batch_size=64))
    assert a[2].losses == b[2].losses
    assert a[1].tobytes() == b[1].tobytes()


def test_train_rejects_wrong_width(rng):
    with pytest.raises(ValueError):
        train_aq(np.zeros((4, 3), np.float32), AqHyper(4, 1, 2), OptimConfig(epochs=1))


def test_train_nan_raises_training_error():
    W = np.zeros((8, 3), np.float32)
    W[2, 1] = np.nan
    with pytest.raises(TrainingError, match="epoch 0"):
        train_aq(W, AqHyper(3, 1, 2, 2), OptimConfig(epochs=1, batch_size=8))


def test_train_recovers_single_codebook_planted(rng):
    # one codebook: the encoder only has to classify, no demixing
    K, D = 4, 4
    centers = 3 * rng.standard_normal((1, K, D)).astype(np.float32)
    codes = rng.integers(0, K, (1024, 1))
    W = reconstruct_hard(codes, centers)
    var = np.mean(np.sum((W - W.mean(0)) ** 2, axis=1))
    enc, books, _ = train_aq(W, AqHyper(D, 1, K, 16, seed=1), OptimConfig(epochs=150, lr=1e-2, batch_size=64))
    mse = recon_loss(W, reconstruct_hard(extract_codes(W, enc), books))
    assert mse <= 0.05 * var


def test_planted_loss_drops_tenfold(rng):
    M, K, D = 4, 16, 8
    A = rng.standard_normal((M, K, D)).astype(np.float32)
    W = reconstruct_hard(rng.integers(0, K, (1024, M)), A)
    _, _, log = train_aq(W, AqHyper(D, M, K, seed=0), OptimConfig(epochs=500, batch_size=64))
    assert log.losses[-1] * 10 <= log.losses[0]


def test_early_stopping():
    W = np.zeros((32, 2), np.float32)
    _, _, log = train_aq(W, AqHyper(2, 1, 2, 2), OptimConfig(epochs=500, patience=3, min_delta=1.0))
    assert log.metadata["epochs_run"] == 4
