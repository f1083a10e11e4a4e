"""Round protocol: clients, the aggregation server (AS), the crypto service
provider (CSP) and an ideal two-party functionality that unmasks the
aggregate and adds Gaussian noise.

One round, with ``P`` the set of clients that submitted::

    client j : Enc(n_j * BHM(kappa * clip(dW_j)))            -> AS
    AS       : c = sum_j Enc(...);  Enc(v) (+) c              -> CSP
    CSP      : n = Dec(Enc(v) (+) c) = c + v  (uniform)        -> F2PC
    AS       : -v                                              -> F2PC
    F2PC     : (n - v) / sum_{j in P} n_j + b_G                -> AS

``b_G`` is derived from random bits contributed by both servers, so
neither learns the noise on its own.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ahe, bhm, dp
from .transcript import (
    AS,
    CSP,
    F2PC,
    AsTwoPcInput,
    ClientPayload,
    CspTwoPcInput,
    RoundTranscript,
    check_view_structure,
    client_role,
    encode_as_input,
    encode_client_payload,
    encode_csp_input,
    encode_matrix,
)

NOISE_MODES = ("combined_bits", "two_party_gaussian")
BITS_PER_ELEMENT = 128


class ThresholdAbort(RuntimeError):
    """Too few submissions to aggregate. The round may be retried."""

    retriable = True

    def __init__(self, received: int, threshold: int):
        super().__init__(f"received {received} updates, threshold is {threshold}")
        self.received = received
        self.threshold = threshold


class MaskReuseError(AssertionError):
    pass


@dataclass
class ClientState:
    client_id: int
    data_size: int
    public_key: ahe.PublicKey
    weights: np.ndarray
    dp: dp.DpParams
    bhm: bhm.BhmParams
    fixed_point: ahe.FixedPointParams
    rng: random.Random = field(default_factory=random.Random, repr=False)


@dataclass
class AsState:
    public_key: ahe.PublicKey
    threshold: int
    bhm: bhm.BhmParams
    fixed_point: ahe.FixedPointParams
    weights: np.ndarray
    rng: random.Random = field(default_factory=random.Random, repr=False)
    received: dict[int, tuple[ahe.Ciphertext, ...]] = field(default_factory=dict, repr=False)
    participating_n: int = 0
    rejected: dict[int, str] = field(default_factory=dict)
    mask: list[int] | None = field(default=None, repr=False)
    _used_masks: set[bytes] = field(default_factory=set, repr=False)

    @property
    def layout(self) -> tuple:
        rows, cols = self.weights.shape
        return (rows, cols, self.bhm.block_size, self.bhm.scaling_factor)

    @property
    def dim(self) -> int:
        rows, cols = self.weights.shape
        gr, gc = bhm.grid_shape(rows, cols, self.bhm.block_size)
        return gr * gc * self.bhm.seq_len


@dataclass
class CspState:
    keypair: ahe.KeyPair = field(repr=False)
    fixed_point: ahe.FixedPointParams
    rng: random.Random = field(default_factory=random.Random, repr=False)
    masked: list[int] | None = field(default=None, repr=False)

    @property
    def public_key(self) -> ahe.PublicKey:
        return self.keypair.public_key

    def __getstate__(self):
        raise TypeError("CspState holds the secret key and must not be serialized")


@dataclass(frozen=True)
class TwoPcInputs:
    csp_input: CspTwoPcInput
    as_input: AsTwoPcInput
    modulus: int
    fixed_point: ahe.FixedPointParams


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


def client_compress(state: ClientState, local_update: np.ndarray) -> bhm.BhmUpdate:
    """Plaintext part of the client pipeline: clip, weight by n_j, compress."""
    update = np.atleast_2d(np.asarray(local_update, dtype=float))
    if update.shape != np.shape(state.weights):
        raise bhm.ShapeMismatchError(f"update shape {update.shape} != model shape {np.shape(state.weights)}")
    clipped = dp.clip(update, state.dp.clip_bound)
    return bhm.compress(state.data_size * clipped, state.bhm)


def client_prepare(state: ClientState, local_update: np.ndarray, total_n: int) -> ClientPayload:
    """Clip, weight, compress, encode and encrypt one client's update.

    The update is weighted by the integer ``n_j`` only; division by the
    participating total happens inside the 2PC so that dropouts do not bias
    the average. ``total_n`` is checked but not used for scaling.
    """
    if not total_n >= state.data_size > 0:
        raise ValueError(f"need total_n >= n_j > 0, got n_j={state.data_size}, total_n={total_n}")
    compressed = client_compress(state, local_update)
    try:
        cts = ahe.encrypt_vector(state.public_key, compressed.flat(), state.fixed_point, state.rng)
    except ahe.EncodingOverflowError as exc:
        raise ahe.EncodingOverflowError(
            f"client {state.client_id}: weighted update exceeds the fixed-point range; "
            f"check clip_bound / scaling_factor ({exc})"
        ) from exc
    return ClientPayload(
        client_id=state.client_id,
        data_size=state.data_size,
        rows=compressed.rows,
        cols=compressed.cols,
        block_size=compressed.block_size,
        scaling_factor=compressed.scaling_factor,
        ciphertexts=tuple(cts),
    )


# ---------------------------------------------------------------------------
# Aggregation server
# ---------------------------------------------------------------------------


def as_aggregate(state: AsState, payloads: Sequence[ClientPayload]) -> list[ahe.Ciphertext]:
    """Fold accepted payloads with homomorphic addition.

    Payloads with the wrong layout or key are rejected individually; the
    round aborts only if fewer than ``threshold`` remain.
    """
    state.received = {}
    state.rejected = {}
    accepted: list[ClientPayload] = []
    for p in payloads:
        if p.layout_key() != state.layout or len(p.ciphertexts) != state.dim:
            state.rejected[p.client_id] = f"layout {p.layout_key()} != {state.layout}"
        elif any(c.key_fingerprint != state.public_key.fingerprint for c in p.ciphertexts):
            state.rejected[p.client_id] = "encrypted under a different key"
        elif p.client_id in state.received:
            state.rejected[p.client_id] = "duplicate submission"
        else:
            state.received[p.client_id] = p.ciphertexts
            accepted.append(p)
    if len(accepted) < state.threshold:
        state.participating_n = 0
        raise ThresholdAbort(len(accepted), state.threshold)
    state.participating_n = sum(p.data_size for p in accepted)
    agg = list(accepted[0].ciphertexts)
    for p in accepted[1:]:
        agg = ahe.hom_add_vector(agg, p.ciphertexts)
    return agg


def as_mask(state: AsState, agg: Sequence[ahe.Ciphertext], mask: Sequence[int] | None = None) -> list[ahe.Ciphertext]:
    """Add a fresh uniform ring mask under encryption.

    ``mask`` is a test hook; normal callers let the AS sample it.
    """
    n = state.public_key.n
    v = [state.rng.randrange(n) for _ in agg] if mask is None else [int(x) % n for x in mask]
    if len(v) != len(agg):
        raise ValueError("mask length does not match aggregate")
    digest = hashlib.sha256(b"".join(x.to_bytes((n.bit_length() + 7) // 8, "big") for x in v)).digest()
    if mask is None and digest in state._used_masks:
        raise MaskReuseError("mask vector reused across rounds")
    state._used_masks.add(digest)
    state.mask = v
    enc_v = ahe.encrypt_ints(state.public_key, v, state.rng)
    return ahe.hom_add_vector(enc_v, agg)


def as_two_pc_input(state: AsState, participants: int) -> AsTwoPcInput:
    if state.mask is None:
        raise RuntimeError("no mask sampled this round")
    n = state.public_key.n
    return AsTwoPcInput(
        neg_mask=tuple((-x) % n for x in state.mask),
        bits=state.rng.randbytes(BITS_PER_ELEMENT // 8 * len(state.mask)),
        participating_n=state.participating_n,
        participants=participants,
    )


def as_erase_mask(state: AsState) -> None:
    if state.mask is not None:
        state.mask[:] = [0] * len(state.mask)
    state.mask = None
    state.received = {}


def as_apply_update(state: AsState, distorted: np.ndarray, bhm_params: bhm.BhmParams | None = None) -> np.ndarray:
    """Decompress the released update and add it to the global model."""
    params = bhm_params or state.bhm
    rows, cols = state.weights.shape
    template = bhm.zeros_like_layout(rows, cols, params)
    flat = np.asarray(distorted, dtype=float).ravel()
    if flat.size != template.stored_count:
        raise bhm.ShapeMismatchError(
            f"distorted update has {flat.size} values, model layout needs {template.stored_count}"
        )
    state.weights = state.weights + bhm.decompress(template.with_values(flat))
    return state.weights


# ---------------------------------------------------------------------------
# Crypto service provider
# ---------------------------------------------------------------------------


def csp_decrypt_masked(state: CspState, masked: Sequence[ahe.Ciphertext]) -> list[int]:
    values = ahe.decrypt_ints(state.keypair.secret_key, masked)
    state.masked = values
    return values


def csp_two_pc_input(state: CspState) -> CspTwoPcInput:
    if state.masked is None:
        raise RuntimeError("CSP has nothing decrypted this round")
    return CspTwoPcInput(
        masked=tuple(state.masked),
        bits=state.rng.randbytes(BITS_PER_ELEMENT // 8 * len(state.masked)),
    )


# ---------------------------------------------------------------------------
# Ideal 2PC functionality
# ---------------------------------------------------------------------------


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(len(a), "little")


def two_pc_noise(inputs: TwoPcInputs, dp_params: dp.DpParams, dim: int, noise_mode: str = "combined_bits") -> np.ndarray:
    """Gaussian noise ``b_G`` as the functionality derives it from both parties' bits."""
    need = BITS_PER_ELEMENT // 8 * dim
    a_bits, c_bits = inputs.as_input.bits, inputs.csp_input.bits
    if len(a_bits) < need or len(c_bits) < need:
        raise ValueError(f"each party must supply at least {BITS_PER_ELEMENT * dim} random bits")
    std = dp_params.noise_std(max(1, inputs.as_input.participants))
    if noise_mode == "combined_bits":
        return dp.gaussian_from_bits(_xor(a_bits[:need], c_bits[:need]), dim, std)
    if noise_mode == "two_party_gaussian":
        half = std / math.sqrt(2.0)
        return dp.gaussian_from_bits(a_bits, dim, half) + dp.gaussian_from_bits(c_bits, dim, half)
    raise ValueError(f"unknown noise_mode {noise_mode!r}; expected one of {NOISE_MODES}")


def ideal_2pc_noise(
    inputs: TwoPcInputs,
    dp_params: dp.DpParams,
    dim: int,
    noise_mode: str = "combined_bits",
) -> np.ndarray:
    """Unmask, reweight and perturb the aggregate; the result goes to AS only.

    Computes ``decode(n + (-v)) / sum n_j + b_G``. Nothing computed here is
    logged to either party's view.
    """
    masked, neg_mask = inputs.csp_input.masked, inputs.as_input.neg_mask
    if len(masked) != dim or len(neg_mask) != dim:
        raise ValueError(f"2PC input dimensions {len(masked)}/{len(neg_mask)} do not match {dim}")
    if inputs.as_input.participating_n <= 0:
        raise ValueError("participating data size must be positive")
    n = inputs.modulus
    ring = [(a + b) % n for a, b in zip(masked, neg_mask)]
    aggregate = ahe.decode_vector(ring, inputs.fixed_point, n) / inputs.as_input.participating_n
    return aggregate + two_pc_noise(inputs, dp_params, dim, noise_mode)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def run_round(
    clients: Sequence[ClientState],
    as_state: AsState,
    csp_state: CspState,
    dropout_set: set[int] | frozenset[int],
    updates: Mapping[int, np.ndarray],
    dp_params: dp.DpParams,
    round_index: int = 0,
    noise_mode: str = "combined_bits",
) -> tuple[np.ndarray, RoundTranscript]:
    """Run one full round and return the new global model and transcript.

    Dropped clients simply never submit. Raises :class:`ThresholdAbort` when
    fewer than ``as_state.threshold`` updates arrive; the model is left
    untouched in that case.
    """
    if noise_mode not in NOISE_MODES:
        raise ValueError(f"unknown noise_mode {noise_mode!r}")
    tr = RoundTranscript(round_index)
    pk = as_state.public_key
    total_n = sum(c.data_size for c in clients)
    w_bytes = encode_matrix(as_state.weights)

    payloads = []
    for c in clients:
        role = client_role(c.client_id)
        tr.log(AS, role, "global_model", w_bytes, as_state.weights.copy())
        c.weights = as_state.weights.copy()
        if c.client_id in dropout_set:
            continue
        payload = client_prepare(c, updates[c.client_id], total_n)
        tr.log(role, AS, "client_update", encode_client_payload(payload), payload)
        payloads.append(payload)

    try:
        agg = as_aggregate(as_state, payloads)
    except ThresholdAbort:
        as_erase_mask(as_state)
        raise
    participants = len(as_state.received)
    tr.participants = tuple(sorted(as_state.received))

    masked = as_mask(as_state, agg)
    tr.log(AS, CSP, "masked_aggregate", ahe.ciphertexts_to_bytes(masked), masked)
    csp_decrypt_masked(csp_state, masked)

    csp_in = csp_two_pc_input(csp_state)
    as_in = as_two_pc_input(as_state, participants)
    tr.log(CSP, F2PC, "2pc_input", encode_csp_input(csp_in), csp_in)
    tr.log(AS, F2PC, "2pc_input", encode_as_input(as_in), as_in)
    inputs = TwoPcInputs(csp_in, as_in, pk.n, as_state.fixed_point)
    distorted = ideal_2pc_noise(inputs, dp_params, as_state.dim, noise_mode)
    tr.log(F2PC, AS, "2pc_output", encode_matrix(distorted), distorted.copy())

    as_erase_mask(as_state)
    csp_state.masked = None
    new_w = as_apply_update(as_state, distorted)
    tr.distorted_update = distorted
    tr.ledger_entry = (dp_params.epsilon, dp_params.delta)
    check_view_structure(tr)
    return new_w, tr


def setup(
    num_clients: int,
    data_sizes: Sequence[int],
    initial_weights: np.ndarray,
    threshold: int,
    dp_params: dp.DpParams,
    bhm_params: bhm.BhmParams,
    fixed_point: ahe.FixedPointParams,
    modulus_bits: int,
    seed: int | str = 0,
) -> tuple[list[ClientState], AsState, CspState]:
    """CSP generates keys and every party receives the public key and W0.

    All randomness is derived from ``seed`` so runs replay exactly.
    """
    if len(data_sizes) != num_clients:
        raise ValueError("need one data size per client")
    kp = ahe.keygen(modulus_bits, random.Random(f"{seed}:keygen"))
    fixed_point.check_modulus(kp.public_key.n)
    w0 = np.atleast_2d(np.asarray(initial_weights, dtype=float)).copy()
    csp = CspState(kp, fixed_point, random.Random(f"{seed}:csp"))
    as_state = AsState(kp.public_key, threshold, bhm_params, fixed_point, w0.copy(), random.Random(f"{seed}:as"))
    clients = [
        ClientState(j, int(data_sizes[j]), kp.public_key, w0.copy(), dp_params, bhm_params, fixed_point,
                    random.Random(f"{seed}:client:{j}"))
        for j in range(num_clients)
    ]
    return clients, as_state, csp
