"""Machine-learning readout of a trapped-ion qubit: simulation, discrimination, embedded emulation."""
