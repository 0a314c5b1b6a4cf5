from setuptools import setup

setup(
    name='forkcast',
    version='0.1',
    description='Multi-future trajectory prediction on forking gridworld '
                'scenarios.',
    long_description=open('./README').read(),
    url='',
    license='MIT License',
    entry_points={
        'console_scripts': [
            'forkcast = forkcast.cli:main',
        ]
        },
    packages=['forkcast'],
    python_requires='>=3.8',
    install_requires=['numpy>=1.20', 'torch>=1.12', 'tqdm'],
    tests_require=['nose2', 'coverage', 'hypothesis'],
    extras_require={
        'test': ['nose2', 'coverage', 'hypothesis'],
        'docs': ['sphinx'],
    },
    )
