# Source: executor fault injection
# Inputs:
#   x (decimal, dimensionless): any number
# Outputs:
#   y (decimal, dimensionless): echo of x
import json
import os
import sys

x = json.load(sys.stdin)["inputs"]["x"]
seen = sorted(os.listdir("."))
with open("scratch.txt", "w") as f:
    f.write("state")
print(json.dumps({"outputs": {"y": len(seen)}}))
