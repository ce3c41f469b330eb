import os
import sys

# Add project root
sys.path.append(os.path.abspath(os.path.dirname(__file__)))
