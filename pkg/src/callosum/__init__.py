from callosum.kernels import BACKEND
