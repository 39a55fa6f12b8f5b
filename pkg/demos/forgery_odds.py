"""How likely is a client to talk its way past the blacklist by guessing r1?"""
from pei_psm.bench import cmd_forge_sim
from pei_psm.psm import forgery_success_bound

t = 1_032_193
r = cmd_forge_sim(t_eff_value=1021, trials=10 ** 6, seed=1)
print(f"small mask space (1021): {r.hits} successes in {r.trials:,} guesses "
      f"= {r.empirical_rate:.3e}, expected {1 / 1021:.3e}")
print(f"baseline t={t}: one guess succeeds with p = {forgery_success_bound(t, 1):.3e}")
for n in (1, 365, 1825, 10_000):
    print(f"  {n:>6} attempts -> at most {forgery_success_bound(t, n):.3e}")
