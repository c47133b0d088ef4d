# Simulation core: model, data, attacks, aggregation and the round engine
