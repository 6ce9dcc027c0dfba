"""
Correcting misspelled caption words
===================================

Captions written by people contain typos. Before tokens are looked up,
out-of-vocabulary words are replaced by the most frequent known word one
edit away, else two edits away.
"""

from rticlab.datastore import SynthSpec, synth_dataset
from rticlab.textprep import Vocabulary, correction_report, spell_correct

words = Vocabulary({"white": 50, "while": 4, "black": 40, "blue": 30, "sleeveless": 5})
for token in ("whtie", "blakc", "bleu", "sleevless", "zzzz", "white"):
    print(f"{token:>10} -> {spell_correct(token, words)}")

# a synthetic set whose captions carry adjacent-letter swaps
ds = synth_dataset(0, SynthSpec(n_items=48, n_triplets=120, typo_rate=0.3))
reference = Vocabulary(ds.word_counts)
report = correction_report((c for r in ds.triplets for c in r.captions), reference)
print()
print("most frequent corrections on the synthetic captions:")
for (orig, fixed), n in sorted(report.items(), key=lambda kv: -kv[1])[:8]:
    print(f"  {orig} -> {fixed}  x{n}")
