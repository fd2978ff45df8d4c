"""sigmap: hierarchical cryptographic-signature mapping over toy SXE executables.

Pipeline: generate a seeded synthetic corpus -> extract per-sample signature
profiles -> build fixed-length hierarchical descriptors -> fit per-family
subspace models -> classify and emit evaluation artifacts.
"""

__version__ = "0.1.0"
