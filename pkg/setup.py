import setuptools

setuptools.setup(
    name='sigmon',
    version='1.0',
    description='Signal-based Bayesian seismic monitoring',
    packages=setuptools.find_packages(exclude=['tests']),
    install_requires=[
        'numpy',
        'scipy',
        'PyWavelets',
        'scikit-learn',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': ['sigmon=sigmon.main:main'],
    },
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
    ],
)
