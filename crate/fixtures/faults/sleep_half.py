# Source: executor fault injection
# Inputs:
#   x (decimal, dimensionless): any number
# Outputs:
#   y (decimal, dimensionless): echo of x
import json
import sys
import time

x = json.load(sys.stdin)["inputs"]["x"]
time.sleep(0.5)
print(json.dumps({"outputs": {"y": x}}))
