"""How compute scales with the number of tokens.

    python3 demos/token_budget.py

The tokenizer's output length N is a free knob. Everything after the
tokenizer scales with N, while the seed stage does not, so the MAC count
is an affine-plus-small-quadratic function of N.
"""

from hook_tokenizer import HookModel, tiny_config
from hook_tokenizer.macs import count_macs, instrumented_macs, token_marginal_macs

base = tiny_config(tokens=6)
print(f"{'N':>4} {'total MACs':>12} {'ovm':>10} {'backbone':>10} {'params':>8}")
for n in (1, 2, 4, 6, 8, 16, 32, 64):
    rep = count_macs(tiny_config(tokens=n))
    print(f"{n:>4} {rep.total:>12,} {rep.macs['ovm']:>10,} {rep.macs['backbone']:>10,} {rep.total_params:>8,}")

print()
print("going from 6 to 8 tokens costs", f"{token_marginal_macs(base, 6, 8):,}", "MACs")
print("a 64x64 image as 4x4 patches would be 256 tokens; the tokenizer hands the backbone 6")

# the analytic count is checked against a forward pass that tallies every multiply-add
model = HookModel(base, 0)
print("analytic == instrumented:", count_macs(base).total == instrumented_macs(model))
