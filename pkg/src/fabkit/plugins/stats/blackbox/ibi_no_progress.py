"""Non-contracting update: copies the potential unchanged.

usage: ibi_no_progress.py CURVE TARGET POTENTIAL NEXT_POTENTIAL
"""

import shutil
import sys

if __name__ == "__main__":
    if len(sys.argv) != 5:
        sys.exit(__doc__)
    shutil.copyfile(sys.argv[3], sys.argv[4])
