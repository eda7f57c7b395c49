from .cli import daemon

daemon()
