from setuptools import setup

setup(
    name = 'cfrelevance',
    version = "0.1.0",
    packages = ['cfrelevance'],
    python_requires = '>=3.8',
    install_requires = [
        'numpy>=1.22',
        'scipy>=1.8',
        'tqdm',
        'Pillow',
    ],
    extras_require = {
        'test': ['pytest', 'scikit-learn'],
    },
    entry_points = {
        'console_scripts': ['cfrelevance = cfrelevance.cfrelevance:main']
    }
)
