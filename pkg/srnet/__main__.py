from __future__ import annotations

from srnet.cli import main

raise SystemExit(main())
