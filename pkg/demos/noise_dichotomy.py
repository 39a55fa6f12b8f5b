"""Why the 204-bit chain fails and the default chain does not.

Evaluates the same blacklisted query under both profiles and prints the
remaining noise budget and what demasking concludes.
"""
from pei_psm import he
from pei_psm.bench import perm_key_from_seed
from pei_psm.encoding import PBHParams, cwc_params_for
from pei_psm.psm import build_query, client_aggregate, demask, prepare_list, psi_sum, sample_masks
from pei_psm.registry import gen_random_list, preprocess

lst = gen_random_list(2048, 4)
pei = next(iter(lst))
for profile in ("paper_original", "default_safe"):
    params = he.gen_params(profile, 8192)
    keys = he.keygen(params)
    pp = PBHParams(8192, perm_key_from_seed(4))
    cp = cwc_params_for(pp.lam_bar, 8, params.plain_modulus)
    prepared = prepare_list(preprocess(lst, pp, cp), params)
    ms = sample_masks(params.plain_modulus, 8192)
    ct = psi_sum(build_query(pei, keys, pp, cp), prepared, ms, keys.rk, cp).ct_res
    budget = he.noise_budget(keys.sk, ct)
    outcome = demask(client_aggregate(he.decrypt(keys.sk, ct), params.plain_modulus), ms)
    print(f"{profile:>15}: primes {params.coeff_bits} ({params.total_bits} bits) "
          f"-> budget {budget} bits, outcome {outcome.value} (truth: Match)")
    if budget == 0:
        print(" " * 17 + "budget 0: the decoded value is not trustworthy even if it happens to match")
