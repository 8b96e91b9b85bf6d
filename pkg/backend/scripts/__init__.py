# Scripts module

