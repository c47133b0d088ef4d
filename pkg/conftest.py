# Keeps the repository root importable (app, setup_logic, components, simulation).
