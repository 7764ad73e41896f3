if __name__ == '__main__':
    import glob
    import unittest
    test_file_strings = sorted(glob.glob('test_*.py'))
    module_strings = [name[0:len(name)-3] for name in test_file_strings]
    suites = [unittest.defaultTestLoader.loadTestsFromName(name) for name
              in module_strings]
    testSuite = unittest.TestSuite(suites)

    unittest.TextTestRunner(verbosity=2).run(testSuite)
