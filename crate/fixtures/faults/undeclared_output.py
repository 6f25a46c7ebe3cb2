# Source: executor fault injection
# Inputs:
#   x (decimal, dimensionless): any number
# Outputs:
#   y (decimal, dimensionless): echo of x
import json

print(json.dumps({"outputs": {"y": 1, "z": 2}}))
