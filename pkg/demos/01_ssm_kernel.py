"""Walk through one diagonal state-space channel: discretize, build the kernel, convolve."""

import numpy as np

from adscribe.ssm import (
    causal_convolve, discretize, format_bench_table, init_ssm, kernel_bench, materialize_kernel, recurrent_scan,
    relative_error,
)

rng = np.random.default_rng(0)

ssm = init_ssm(8, rng)           # 8 complex poles, real part -1/2, imaginary ladder pi*n
print("poles:", np.round(ssm.a_diag[:4], 3), "...")
print("step:", round(ssm.step, 4))

d = discretize(ssm)              # bilinear map into the unit disk
print("|a_bar| max:", np.abs(d.a_bar).max())

kernel = materialize_kernel(d, 256)
print("first taps:", np.round(kernel.taps[:6], 5))

u = rng.normal(size=256)
y_fft = causal_convolve(kernel, u)   # O(L log L)
y_rec = recurrent_scan(d, u)         # O(L R), the reference
print("fft vs recurrence rel err:", relative_error(y_fft, y_rec))

# an impulse reproduces the kernel
impulse = np.zeros(256)
impulse[0] = 1.0
print("impulse response == taps:", np.allclose(recurrent_scan(d, impulse), kernel.taps))

# causality: zeroing the future leaves the past alone
cut = u.copy()
cut[100:] = 0.0
print("past unchanged:", np.allclose(causal_convolve(kernel, cut)[:100], y_fft[:100]))

print()
print(format_bench_table([kernel_bench(n, 16, trials=2) for n in (64, 257, 1024)]))
