"""
Preditor de trajetórias de curto prazo com codificador de cápsulas
Camadas semânticas do mapa + estados do agente -> posições futuras (6 s)
"""

import sys

from modules.cli import main

if __name__ == "__main__":
    sys.exit(main())
