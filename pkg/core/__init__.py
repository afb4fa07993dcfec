import jax

# every tolerance in this package is a double-precision tolerance
jax.config.update("jax_enable_x64", True)
