# Source: executor fault injection
# Inputs:
#   x (decimal, dimensionless): any number
# Outputs:
#   y (decimal, dimensionless): echo of x
import json
import sys

x = json.load(sys.stdin)["inputs"]["x"]
# According to the identity rule, y equals x.
print(json.dumps({"outputs": {"y": x}}))
