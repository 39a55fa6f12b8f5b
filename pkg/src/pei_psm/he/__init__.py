"""Self-contained BFV layer (batched, full-RNS)."""
from .params import HEParams, ParamError, gen_params, context
from .bfv import (
    Cipher, HEError, KeyMaterial, Plaintext, PublicKey, RelinKeys, SecretKey,
    TensorAccumulator, add_ct, add_pt, decode, decrypt, encode, encrypt,
    encrypt_symmetric, inner_product_plain, inner_product_stacked, keygen,
    mod_switch_next, mod_switch_to, mul_ct, mul_pt, mul_scalar, noise_budget,
    relinearize, stack_ntt, sub_ct,
)
from .serialize import (
    SerializationError, blob_length, deserialize_cipher, deserialize_keys,
    deserialize_params, deserialize_public_key, deserialize_relin_keys,
    deserialize_secret_key, serialize_cipher, serialize_keys, serialize_params,
    serialize_public_key, serialize_relin_keys, serialize_secret_key,
)

__all__ = [
    "HEParams", "ParamError", "gen_params", "context", "Cipher", "HEError",
    "KeyMaterial", "Plaintext", "PublicKey", "RelinKeys", "SecretKey",
    "TensorAccumulator", "add_ct", "add_pt", "decode", "decrypt", "encode",
    "encrypt", "encrypt_symmetric", "inner_product_plain", "inner_product_stacked",
    "keygen", "mod_switch_next", "mod_switch_to", "mul_ct", "mul_pt", "mul_scalar",
    "noise_budget", "relinearize", "stack_ntt", "sub_ct", "SerializationError",
    "blob_length", "deserialize_cipher", "deserialize_keys", "deserialize_params",
    "deserialize_public_key", "deserialize_relin_keys", "deserialize_secret_key",
    "serialize_cipher", "serialize_keys", "serialize_params", "serialize_public_key",
    "serialize_relin_keys", "serialize_secret_key",
]
