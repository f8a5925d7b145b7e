"""Quick end-to-end check of the extension module.

    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/evidex-*.whl
    python crates/py/python/smoke.py
"""

import evidex

ok, table = evidex.selftest(seed=1)
print(table)
assert ok, "engine self-test failed"

img = evidex.generate_image(1, size=32, seed=5)
assert len(img.pixels) == 3 * 32 * 32
assert sum(img.truth_mask) > 0
print(img)

model, acc = evidex.Classifier.train(n_per_class=20, size=32, epochs=3, seed=0)
print(f"held-out accuracy after 3 epochs: {acc:.2f}, digest {model.digest[:12]}")

label, probs = model.predict(img.pixels)
assert 0 <= label < len(evidex.CLASS_NAMES)
assert abs(sum(probs) - 1.0) < 1e-9

ex = evidex.explain(model, img.pixels, steps=20, seed=3)
print(ex)
assert len(ex.mask) == 32 * 32
assert all(0.0 <= v <= 1.0 for v in ex.mask)
assert ex.label == label

again = evidex.explain(model, img.pixels, steps=20, seed=3)
assert again.mask == ex.mask, "explanations must be deterministic"

heat, degenerate = evidex.gradcam(model, img.pixels)
if not degenerate:
    assert min(heat) == 0.0 and max(heat) == 1.0
top = evidex.threshold_heatmap(heat, 32, 0.1)
assert sum(top) == round(0.1 * 32 * 32)

try:
    evidex.explain(model, img.pixels, steps=0)
except ValueError as e:
    print("rejected:", e)
else:
    raise AssertionError("steps=0 must be rejected")

print("smoke test passed")
