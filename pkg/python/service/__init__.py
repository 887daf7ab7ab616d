# Computational services and the experiment coordinator
