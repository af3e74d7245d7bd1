import sys

from gafcnn.cli import main

sys.exit(main())
