__version__   = '0.1.0'
__author__    = 'LidarRoads Developers'
__license__   = 'MIT'
__copyright__ = 'Copyright 2026 LidarRoads Developers'
