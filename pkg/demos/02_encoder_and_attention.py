"""A tiny transformer encoder, its attention maps, and padding behavior.

Runs a randomly initialized 2-layer encoder over a tokenized sentence pair,
captures per-head attention, and shows that padded positions receive exactly
zero attention, which makes batch results independent of trailing pads.
"""

import numpy as np

from mdkd import EncoderModel, Example, ModelConfig, SyntheticTask, make_batch, tokenize

task = SyntheticTask(n_symbols=12, min_tokens=3, max_tokens=5)
vocab = task.vocab()
config = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32,
                     vocab_size=len(vocab), max_seq_len=12, n_classes=2)
model = EncoderModel.init_random(config, seed=1)
print(f"model: {config.n_layers} layers, {config.n_heads} heads, "
      f"{model.n_params()} parameters")

example = Example("w01 w02 w03", "w02 w04")
ids, mask, segments = tokenize(example, vocab, config.max_seq_len)
n_real = sum(mask)
print("tokens:", [vocab.tokens()[i] for i, m in zip(ids, mask) if m])

# --- capture attention -------------------------------------------------------
record = model.encode(ids, mask, capture=True, segments=segments)
att = record.attention[0][0].data  # layer 0, head 0
print(f"\nlayer 0 / head 0 attention over {n_real} real tokens:")
with np.printoptions(precision=3, suppress=True):
    print(att[:n_real, :n_real])
print("rows sum to one:", np.allclose(att[:n_real].sum(axis=1), 1.0))
print("pad columns are exactly zero:", np.all(att[:n_real, n_real:] == 0.0))

# --- trailing pads do not change anything ------------------------------------
batch_padded = make_batch([example], vocab, config.max_seq_len, trim=False)
batch_trimmed = make_batch([example], vocab, config.max_seq_len)
out_padded = model.encode_batch(batch_padded.ids, batch_padded.mask, batch_padded.segments)
out_trimmed = model.encode_batch(batch_trimmed.ids, batch_trimmed.mask, batch_trimmed.segments)
same = np.array_equal(out_padded.probs.data, out_trimmed.probs.data)
print(f"\npadded batch length {batch_padded.ids.shape[1]}, "
      f"trimmed {batch_trimmed.ids.shape[1]}; identical probabilities: {same}")
print("class probabilities:", np.round(out_trimmed.probs.data[0], 4))
