# Source: executor fault injection
# Inputs:
#   x (decimal, dimensionless): any number
# Outputs:
#   y (decimal, dimensionless): echo of x
import json
import sys

x = json.load(sys.stdin)["inputs"]["x"]
raise ValueError("bad input %r" % x)
