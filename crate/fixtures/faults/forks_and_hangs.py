# Source: executor fault injection
# Inputs:
#   x (decimal, dimensionless): any number
# Outputs:
#   y (decimal, dimensionless): echo of x
import subprocess
import sys
import time

# The grandchild must die with the group.
child = subprocess.Popen([sys.executable, "-c", "import time; time.sleep(600)", "kipg-orphan-probe"])
print(child.pid, flush=True)
time.sleep(600)
